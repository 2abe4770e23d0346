# Gaussian posteriors, the reparameterized latent and the bridging KL.
import torch

from metabridge.latent import DiagGaussian, kl_divergence, pool_set, reparameterize

f64 = dict(dtype=torch.float64)

# two records' posteriors over a 2-d latent
a = DiagGaussian(torch.tensor([0.0, 1.0], **f64), torch.tensor([0.0, -1.0], **f64))
b = DiagGaussian(torch.tensor([2.0, 1.0], **f64), torch.tensor([0.5, -1.0], **f64))

eps = torch.randn(5, 2, generator=torch.Generator().manual_seed(0), **f64)
print("samples from a:\n", reparameterize(a, eps))
print("eps = 0 gives the mean:", reparameterize(a, torch.zeros(2, **f64)))

# a set is summarised by averaging means and log-sigmas
pooled = pool_set([a, b])
print("pooled mean", pooled.mu.tolist(), "log-sigma", pooled.log_sigma.tolist())

# the bridge term compares pooled query and pooled support posteriors
print("KL(a || a) =", float(kl_divergence(a, a)))
print("KL(a || b) =", float(kl_divergence(a, b)), " KL(b || a) =", float(kl_divergence(b, a)))

# fixing all sigmas to 1 leaves half the squared mean gap
print("fixed variance:", float(kl_divergence(a.fixed_variance(), b.fixed_variance())),
      "= |mu_a - mu_b|^2 / 2 =", float(((a.mu - b.mu) ** 2).sum() / 2))
