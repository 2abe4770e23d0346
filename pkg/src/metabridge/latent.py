"""Diagonal Gaussian posteriors: sampling, closed-form KL, set pooling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

LOG_SIGMA_MIN, LOG_SIGMA_MAX = -6.0, 6.0


@dataclass(frozen=True)
class DiagGaussian:
    """``N(mu, diag(exp(log_sigma))**2)``; leading axes index records."""

    mu: torch.Tensor
    log_sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise ValueError(f"mu {tuple(self.mu.shape)} and log_sigma {tuple(self.log_sigma.shape)} differ")

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    def fixed_variance(self) -> "DiagGaussian":
        """Same means with every sigma forced to 1."""
        return DiagGaussian(self.mu, torch.zeros_like(self.log_sigma))


def clamp_log_sigma(log_sigma: torch.Tensor) -> torch.Tensor:
    return torch.clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)


def reparameterize(g: DiagGaussian, eps: torch.Tensor) -> torch.Tensor:
    return g.mu + torch.exp(g.log_sigma) * eps


def deterministic_latent(g: DiagGaussian) -> torch.Tensor:
    return g.mu


def kl_divergence(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """KL(q || p) summed over the last axis.

    In the episode objective ``q`` is the pooled query posterior and ``p``
    the pooled support posterior.
    """
    var_q = torch.exp(2.0 * q.log_sigma)
    var_p = torch.exp(2.0 * p.log_sigma)
    terms = (p.log_sigma - q.log_sigma) + (var_q + (q.mu - p.mu) ** 2) / (2.0 * var_p) - 0.5
    return terms.sum(dim=-1)


def pool_set(posteriors: DiagGaussian | Sequence[DiagGaussian]) -> DiagGaussian:
    """Average means and log-sigmas over records (axis 0), then re-clamp."""
    if isinstance(posteriors, DiagGaussian):
        mu, ls = posteriors.mu, posteriors.log_sigma
        if mu.dim() == 1:
            mu, ls = mu[None], ls[None]
    else:
        posteriors = list(posteriors)
        if not posteriors:
            raise ValueError("cannot pool an empty set of posteriors")
        dims = {g.dim for g in posteriors}
        if len(dims) != 1:
            raise ValueError(f"posteriors disagree on dimension: {sorted(dims)}")
        mu = torch.stack([g.mu for g in posteriors])
        ls = torch.stack([g.log_sigma for g in posteriors])
    if mu.shape[0] == 0:
        raise ValueError("cannot pool an empty set of posteriors")
    return DiagGaussian(mu.mean(dim=0), clamp_log_sigma(ls.mean(dim=0)))
