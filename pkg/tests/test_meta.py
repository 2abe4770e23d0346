import math

import numpy as np
import pytest
import torch

from gradcheck import finite_difference, max_rel_error
from micro import MICRO, micro_params, random_batch, random_episode
from metabridge import diffcore
from metabridge.data import generate_synthetic, split_by_category, build_vocab
from metabridge.diffcore import AdamState, NonFiniteError
from metabridge.encoder import EncoderConfig, encode_posterior
from metabridge.latent import DiagGaussian, kl_divergence, pool_set
from metabridge.meta import (
    FULL, KL_FIXED_VARIANCE, MAML, STOCHASTIC_MAML, MetaConfig, adapt, adapt_params, entropy,
    episode_loss, maml_episode_loss, meta_gradient, meta_step, predict, query_terms,
    support_entropy_loss, train,
)


def forced_decoder(params, logit_gap):
    """Decoder that ignores z and outputs softmax((0, logit_gap))."""
    p = dict(params)
    p["dec/w"] = torch.zeros_like(p["dec/w"])
    p["dec/b"] = torch.tensor([0.0, logit_gap], dtype=torch.float64)
    return p


class TestConfig:
    def test_defaults(self):
        c = MetaConfig()
        assert (c.alpha, c.beta, c.lam, c.inner_steps, c.meta_batch, c.epochs) == (1e-4, 0.3, 1.0, 1, 64, 400)
        assert (c.n_support, c.n_query, c.order, c.mode) == (100, 5, "first", FULL)

    @pytest.mark.parametrize("kw", [dict(alpha=0), dict(beta=-1), dict(lam=-0.1), dict(inner_steps=-1),
                                    dict(meta_batch=0), dict(order="third"), dict(mode="bayes")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            MetaConfig(**kw)


class TestEntropy:
    def test_uniform_is_ln2(self):
        p = forced_decoder(micro_params(), 0.0)
        loss = support_entropy_loss(p, random_episode(0).support, MICRO)
        assert abs(float(loss) - math.log(2)) <= 1e-15

    def test_near_degenerate(self):
        # softmax((0, -27.631)) puts ~1e-12 on the second class
        p = forced_decoder(micro_params(), math.log(1e-12))
        assert float(support_entropy_loss(p, random_episode(0).support, MICRO)) < 1e-10

    def test_mean_of_per_record(self):
        params, ep = micro_params(1), random_episode(3, n_support=6)
        whole = float(support_entropy_loss(params, ep.support, MICRO, deterministic=True))
        per = []
        for i in range(6):
            one = type(ep.support)(ep.support.profile[i:i + 1], ep.support.value[i:i + 1], None)
            g = encode_posterior(params, one, MICRO)
            pr = torch.softmax(g.mu @ params["dec/w"] + params["dec/b"], -1)[0]
            per.append(-sum(float(x) * math.log(float(x)) for x in pr))
        assert abs(whole - sum(per) / 6) <= 1e-14

    def test_non_negative(self):
        for s in range(5):
            assert float(support_entropy_loss(micro_params(s), random_episode(s).support, MICRO)) >= 0


class TestAdapt:
    def test_zero_beta_is_identity(self):
        params = micro_params()
        # beta must be positive in configs, but the primitive accepts 0
        out = adapt_params(params, random_episode(0).support, MICRO, 0.0, 1, deterministic=True)
        assert all(torch.equal(out[k], params[k]) for k in params)

    def test_zero_steps_is_identity(self):
        params = micro_params()
        out = adapt(params, random_episode(0).support, MICRO, 0.3, 0)
        assert all(out.params[k] is params[k] or torch.equal(out.params[k], params[k]) for k in params)
        assert out.provenance["inner_steps"] == 0

    def test_adapts_all_parameters(self):
        params = micro_params()
        out = adapt(params, random_episode(0).support, MICRO, 0.3, 1).params
        assert list(out) == list(params)
        assert all(out[k].shape == params[k].shape for k in params)
        # with z = mu the log-sigma head does not reach the loss
        moved = {k for k in params if not torch.equal(out[k], params[k])}
        assert moved == {k for k in params if not k.startswith("enc/logsigma")}

    @pytest.mark.parametrize("beta", [1e-3, 1e-4])
    def test_descent(self, beta):
        for s in range(5):
            params, sup = micro_params(s), random_episode(10 + s).support
            before = float(support_entropy_loss(params, sup, MICRO, deterministic=True))
            after = float(support_entropy_loss(adapt(params, sup, MICRO, beta, 1).params, sup, MICRO,
                                               deterministic=True))
            assert after <= before + 1e-9

    def test_non_finite(self):
        params = dict(micro_params())
        params["dec/w"] = params["dec/w"] * float("nan")
        with pytest.raises(NonFiniteError, match="inner loss"):
            adapt(params, random_episode(0).support, MICRO, 0.3, 1)


class TestEpisodeLoss:
    def test_maml_equivalence(self):
        for s in range(10):
            params, ep = micro_params(s), random_episode(100 + s)
            ours = float(episode_loss(params, ep, MICRO, 0.0, FULL, deterministic=True))
            ref = float(maml_episode_loss(params, ep, MICRO, 0.3, 1))
            assert abs(ours - ref) <= 1e-12

    def test_kl_zero_when_sets_coincide(self):
        params, ep = micro_params(2), random_episode(5, n_support=3, n_query=3)
        same = ep.query
        nolabel = type(same)(same.profile, same.value, None)
        nll, kl = query_terms(params, nolabel, same, MICRO, FULL, training=False, deterministic=True)
        assert float(kl) == 0.0
        total = float(episode_loss(params, type(ep)("c", nolabel, same), MICRO, 1.0, FULL,
                                   inner_steps=0, deterministic=True))
        assert total == float(nll)

    def test_additivity(self):
        params, ep = micro_params(3), random_episode(6)
        adapted = adapt_params(params, ep.support, MICRO, 0.3, 1, deterministic=True)
        nll, kl = query_terms(adapted, ep.support, ep.query, MICRO, FULL, deterministic=True)
        for lam in (0.5, 1.0, 3.0):
            total = float(episode_loss(params, ep, MICRO, lam, FULL, deterministic=True))
            assert abs(total - (float(nll) + lam * float(kl))) <= 1e-14

    def test_lambda_continuity(self):
        params, ep = micro_params(4), random_episode(7)
        at0 = float(episode_loss(params, ep, MICRO, 0.0, FULL, deterministic=True))
        near = float(episode_loss(params, ep, MICRO, 1e-9, FULL, deterministic=True))
        assert abs(at0 - near) <= 1e-8

    def test_kl_fixed_variance_is_half_squared_mean_gap(self):
        params, ep = micro_params(5), random_episode(8)
        _, kl = query_terms(params, ep.support, ep.query, MICRO, KL_FIXED_VARIANCE, training=False)
        mu_s = encode_posterior(params, ep.support, MICRO).mu.mean(0)
        mu_q = encode_posterior(params, ep.query, MICRO).mu.mean(0)
        assert abs(float(kl) - float(((mu_q - mu_s) ** 2).sum() / 2)) <= 1e-14
        zero = torch.zeros_like(mu_s)
        general = kl_divergence(DiagGaussian(mu_q, zero), DiagGaussian(mu_s, zero))
        assert abs(float(kl) - float(general)) <= 1e-15

    def test_variant_sampling_rules(self):
        params, ep = micro_params(6), random_episode(9)
        run = lambda mode: float(episode_loss(params, ep, MICRO, 1.0, mode, torch.Generator().manual_seed(0),
                                              training=True))
        det = float(episode_loss(params, ep, MICRO, 0.0, MAML, training=False))
        # maml and stochastic maml ignore lam; maml never samples z
        assert run(MAML) == float(episode_loss(params, ep, MICRO, 5.0, MAML, torch.Generator().manual_seed(0),
                                               training=True))
        assert run(STOCHASTIC_MAML) != run(MAML)
        assert np.isfinite(det) and np.isfinite(run(FULL)) and np.isfinite(run(KL_FIXED_VARIANCE))

    def test_training_sampling_reproducible(self):
        params, ep = micro_params(7), random_episode(10)
        a = episode_loss(params, ep, MICRO, 1.0, FULL, torch.Generator().manual_seed(3))
        b = episode_loss(params, ep, MICRO, 1.0, FULL, torch.Generator().manual_seed(3))
        c = episode_loss(params, ep, MICRO, 1.0, FULL, torch.Generator().manual_seed(4))
        assert float(a) == float(b) != float(c)


class TestGradients:
    """Analytic gradients against central finite differences on the micro model."""

    def test_inner_loss(self):
        params, ep = micro_params(11), random_episode(11)
        fn = lambda p: support_entropy_loss(p, ep.support, MICRO, FULL, True, False, torch.Generator().manual_seed(1))
        _, g = diffcore.gradient(fn, params)
        assert max_rel_error(g, finite_difference(fn, params)) <= 1e-4

    def test_full_episode_loss(self):
        params, ep = micro_params(12), random_episode(12)
        fn = lambda p, cg=False: episode_loss(p, ep, MICRO, 1.0, FULL, torch.Generator().manual_seed(2),
                                              create_graph=cg)
        _, g = diffcore.gradient(lambda p: fn(p, True), params)
        assert max_rel_error(g, finite_difference(fn, params)) <= 1e-4


# Toy model: prediction u*v*x, inner loss (u v x_s - a)^2 / 2, outer loss (u v x_q - b)^2 / 2.
TOY = dict(u=0.8, v=-0.6, xs=1.3, a=0.4, xq=-0.7, b=0.9)


def toy_losses(t=TOY):
    inner = lambda p: 0.5 * (p["u"] * p["v"] * t["xs"] - t["a"]) ** 2
    outer = lambda p: 0.5 * (p["u"] * p["v"] * t["xq"] - t["b"]) ** 2
    return inner, outer


def toy_hand(beta, t=TOY):
    """(second-order, first-order) meta-gradients computed by hand."""
    u, v, xs, a, xq, b = (t[k] for k in ("u", "v", "xs", "a", "xq", "b"))
    rs = u * v * xs - a
    u1, v1 = u - beta * rs * v * xs, v - beta * rs * u * xs
    rq = u1 * v1 * xq - b
    g1 = np.array([rq * v1 * xq, rq * u1 * xq])
    hess = np.array([[(v * xs) ** 2, u * v * xs**2 + rs * xs],
                     [u * v * xs**2 + rs * xs, (u * xs) ** 2]])
    return (np.eye(2) - beta * hess).T @ g1, g1


def toy_params():
    return {"u": torch.tensor(TOY["u"], dtype=torch.float64), "v": torch.tensor(TOY["v"], dtype=torch.float64)}


def toy_meta(beta, order):
    inner, outer = toy_losses()
    _, g = meta_gradient(toy_params(), inner, outer, beta, 1, order)
    return np.array([float(g["u"]), float(g["v"])])


class TestToyMetaGradient:
    @pytest.mark.parametrize("beta", [0.3, 0.05])
    def test_second_order(self, beta):
        assert np.max(np.abs(toy_meta(beta, "second") - toy_hand(beta)[0])) <= 1e-8

    @pytest.mark.parametrize("beta", [0.3, 0.05])
    def test_first_order(self, beta):
        assert np.max(np.abs(toy_meta(beta, "first") - toy_hand(beta)[1])) <= 1e-8

    def test_orders_converge_as_beta_shrinks(self):
        gaps = {b: np.max(np.abs(toy_meta(b, "second") - toy_meta(b, "first"))) for b in (1e-1, 1e-2, 1e-3, 1e-4)}
        c = gaps[1e-1] / 1e-1
        assert all(gap <= 1.5 * c * b for b, gap in gaps.items())
        assert gaps[1e-4] < 1e-3 * gaps[1e-1] * 10

    def test_zero_inner_steps_orders_agree(self):
        inner, outer = toy_losses()
        _, a = meta_gradient(toy_params(), inner, outer, 0.3, 0, "first")
        _, b = meta_gradient(toy_params(), inner, outer, 0.3, 0, "second")
        assert all(torch.equal(a[k], b[k]) for k in a)


def small_meta(**kw):
    base = dict(alpha=1e-2, beta=0.3, meta_batch=2, epochs=3, n_support=6, n_query=3, seed=0)
    base.update(kw)
    return MetaConfig(**base)


class TestMetaStep:
    def gens(self, n):
        return [torch.Generator().manual_seed(i) for i in range(n)]

    def test_duplicate_episode_doubles_gradient(self):
        from metabridge.meta import episode_gradient
        params, ep = micro_params(20), random_episode(20)
        cfg = small_meta()
        _, g1 = episode_gradient(params, ep, MICRO, cfg, torch.Generator().manual_seed(0))
        _, g2 = episode_gradient(params, ep, MICRO, cfg, torch.Generator().manual_seed(0))
        doubled = diffcore.add_grads(g1, g2)
        assert all(torch.equal(doubled[k], 2 * g1[k]) for k in g1)

    def test_zero_gradient_keeps_params(self):
        # a decoder with zero weights and a zero-dimensional dependence on inputs:
        # uniform predictions, all-zero query labels drawn from the same set => derivative in dec/b only
        params = forced_decoder(micro_params(21), 0.0)
        zero = {k: torch.zeros_like(v) for k, v in params.items()}
        new, state = diffcore.adam_step(params, zero, AdamState.init(params), 1e-2)
        assert all(torch.equal(new[k], params[k]) for k in params)

    def test_workers_bit_identical(self):
        params = micro_params(22)
        eps = [random_episode(30 + i) for i in range(6)]
        out = {}
        for w in (1, 4):
            cfg = small_meta(workers=w)
            out[w] = meta_step(params, eps, MICRO, cfg, AdamState.init(params), self.gens(6))
        assert out[1][2] == out[4][2]
        assert all(torch.equal(out[1][0][k], out[4][0][k]) for k in params)

    @pytest.mark.parametrize("order", ["first", "second"])
    def test_descent_tripwire(self, order):
        params, ep = micro_params(23), random_episode(23)
        cfg = small_meta(order=order)
        fixed_loss = lambda p: float(episode_loss(p, ep, MICRO, 1.0, FULL, torch.Generator().manual_seed(0)))
        start = fixed_loss(params)
        state = AdamState.init(params)
        losses = []
        for _ in range(50):
            params, state, _ = meta_step(params, [ep], MICRO, cfg, state, [torch.Generator().manual_seed(0)])
            losses.append(fixed_loss(params))
        assert losses[-1] < start
        assert max(losses) <= 10 * start

    def test_empty_batch(self):
        params = micro_params()
        with pytest.raises(ValueError):
            meta_step(params, [], MICRO, small_meta(), AdamState.init(params), [])


class TestPredict:
    def test_bit_identical_and_range(self):
        params, ep = micro_params(30), random_episode(30, n_query=8)
        a = predict(params, ep.support, ep.query, MICRO, 0.3, 1)
        b = predict(params, ep.support, ep.query, MICRO, 0.3, 1)
        assert np.array_equal(a, b) and a.shape == (8,)
        assert bool(((a > 0) & (a < 1)).all())

    def test_no_adaptation_ignores_support(self):
        params = micro_params(31)
        e1, e2 = random_episode(31, category="a"), random_episode(32, category="b")
        shared = e1.query
        a = predict(params, e1.support, shared, MICRO, 0.3, 0)
        b = predict(params, e2.support, shared, MICRO, 0.3, 0)
        assert np.array_equal(a, b)
        assert not np.array_equal(predict(params, e1.support, shared, MICRO, 0.3, 1),
                                  predict(params, e2.support, shared, MICRO, 0.3, 1))


@pytest.fixture(scope="module")
def tiny_task():
    recs = generate_synthetic(6, 16, vocab_size=12, seed=3)
    split = split_by_category(recs, (4, 1, 1), seed=0)
    return split, build_vocab(recs)


TINY_ENC = EncoderConfig(d_model=4, n_heads=2, max_len_profile=12, max_len_value=3)


class TestTrain:
    def test_zero_epochs_returns_init(self, tiny_task):
        split, vocab = tiny_task
        res = train(small_meta(epochs=0), split, vocab, TINY_ENC)
        assert res.history == [] and res.best_epoch == 0
        assert all(torch.equal(res.best_params[k], res.init_params[k]) for k in res.init_params)
        assert all(torch.equal(res.final_params[k], res.init_params[k]) for k in res.init_params)

    def test_deterministic(self, tiny_task):
        split, vocab = tiny_task
        a = train(small_meta(), split, vocab, TINY_ENC)
        b = train(small_meta(), split, vocab, TINY_ENC)
        assert a.history == b.history and a.best_epoch == b.best_epoch
        assert all(torch.equal(a.best_params[k], b.best_params[k]) for k in a.best_params)

    def test_history_schema(self, tiny_task):
        split, vocab = tiny_task
        seen = []
        res = train(small_meta(epochs=2, resample_episodes=True), split, vocab, TINY_ENC, on_epoch=seen.append)
        assert [r["epoch"] for r in res.history] == [1, 2] and seen == res.history
        assert set(res.history[0]) == {"epoch", "train_loss", "val_pr_auc", "checkpoint"}
        assert res.history[0]["checkpoint"] is True

    def test_seed_changes_run(self, tiny_task):
        split, vocab = tiny_task
        a = train(small_meta(epochs=1), split, vocab, TINY_ENC)
        b = train(small_meta(epochs=1, seed=1), split, vocab, TINY_ENC)
        assert a.history != b.history
