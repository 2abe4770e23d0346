"""Meta-training objective, adaptation, the outer training loop and prediction.

Per episode (one category):

1. adapt all parameters with ``inner_steps`` gradient steps of the mean
   prediction entropy over the unlabeled support set;
2. with the adapted parameters, encode support and query records, take
   the NLL of the query labels under a latent sampled from each query
   record's posterior, and add ``lam * KL(pooled query || pooled support)``.

The outer update sums episode gradients over a meta-batch and applies Adam.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import diffcore
from .data import DatasetSplit, Episode, ProductRecord, Vocab, sample_episode
from .diffcore import AdamState, NonFiniteError, ParamSet
from .encoder import EncodedBatch, EncoderConfig, decode, encode_pairs, encode_posterior, encode_records
from .latent import DiagGaussian, kl_divergence, pool_set, reparameterize
from .metrics import pr_auc
from .seeding import derive_seed, numpy_rng, torch_generator

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

FULL = "full"
MAML = "maml"
STOCHASTIC_MAML = "stochastic_maml"
KL_FIXED_VARIANCE = "kl_fixed_variance"
MODES = (FULL, MAML, STOCHASTIC_MAML, KL_FIXED_VARIANCE)


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 1e-4
    beta: float = 0.3
    lam: float = 1.0
    inner_steps: int = 1
    meta_batch: int = 64
    epochs: int = 400
    n_support: int = 100
    n_query: int = 5
    n_query_eval: int | None = None  # None: every labeled record outside the support set
    order: str = "first"
    mode: str = FULL
    resample_episodes: bool = False
    steps_per_epoch: int = 1
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.inner_steps < 0 or self.meta_batch < 1 or self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("inner_steps >= 0, meta_batch >= 1, epochs >= 0, steps_per_epoch >= 1 required")
        if self.n_support < 1 or self.n_query < 1:
            raise ValueError("n_support and n_query must be >= 1")
        if self.order not in ("first", "second"):
            raise ValueError(f"order must be 'first' or 'second', got {self.order!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EpisodeBatch:
    category_id: str
    support: EncodedBatch
    query: EncodedBatch

    @classmethod
    def from_episode(cls, ep: Episode, vocab: Vocab, cfg: EncoderConfig) -> "EpisodeBatch":
        return cls(ep.category_id, encode_records(vocab, ep.support, cfg, with_labels=False),
                   encode_records(vocab, ep.query, cfg))


@dataclass(frozen=True)
class AdaptedModel:
    params: ParamSet
    category_id: str
    provenance: dict = field(default_factory=dict)


# ----------------------------------------------------------- latent choice

def _latent(g: DiagGaussian, mode: str, training: bool, deterministic: bool,
            generator: torch.Generator | None) -> torch.Tensor:
    """Decoder input for each record under the variant's sampling rule."""
    if deterministic or not training or mode in (MAML, KL_FIXED_VARIANCE):
        return g.mu
    eps = torch.randn(g.mu.shape, generator=generator, dtype=diffcore.DTYPE)
    if mode == STOCHASTIC_MAML:
        return g.mu + eps
    return reparameterize(g, eps)


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(p, min=PROB_FLOOR))


def entropy(probs: torch.Tensor) -> torch.Tensor:
    """Per-row entropy of class distributions ``(..., 2)``."""
    return -(probs * _safe_log(probs)).sum(dim=-1)


def support_entropy_loss(params: ParamSet, support: EncodedBatch, cfg: EncoderConfig,
                         mode: str = FULL, training: bool = False, deterministic: bool = False,
                         generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean prediction entropy over the support records."""
    drop_off = deterministic or not training
    g = encode_posterior(params, support, cfg, generator, drop_off)
    z = _latent(g, mode, training, deterministic, generator)
    return entropy(decode(params, z)).mean()


def adapt_params(params: ParamSet, support: EncodedBatch, cfg: EncoderConfig, beta: float,
                 inner_steps: int, mode: str = FULL, training: bool = False, deterministic: bool = False,
                 generator: torch.Generator | None = None, create_graph: bool = False) -> ParamSet:
    """``inner_steps`` gradient-descent steps on the support entropy, all parameters.

    With ``create_graph`` the result stays differentiable with respect to
    ``params`` (which must then require grad); otherwise it is detached.
    """
    p = params
    for _ in range(inner_steps):
        fn = lambda q: support_entropy_loss(q, support, cfg, mode, training, deterministic, generator)
        try:
            _, g = diffcore.gradient(fn, p, create_graph=create_graph, wrt=p if create_graph else None)
        except NonFiniteError as exc:
            raise NonFiniteError("inner loss", exc.value) from None
        p = diffcore.sgd_step(p, g, beta)
    return p


def adapt(params: ParamSet, support: EncodedBatch, cfg: EncoderConfig, beta: float, inner_steps: int,
          category_id: str = "", base_id: str = "") -> AdaptedModel:
    """Deterministic test-time adaptation (latent = mean, dropout off)."""
    adapted = adapt_params(params, support, cfg, beta, inner_steps, training=False, deterministic=True)
    return AdaptedModel(diffcore.detach(adapted), category_id,
                        {"base": base_id, "inner_steps": inner_steps, "beta": beta})


def query_terms(adapted: ParamSet, support: EncodedBatch, query: EncodedBatch, cfg: EncoderConfig,
                mode: str = FULL, training: bool = True, deterministic: bool = False,
                generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """(inference loss, bridging KL) under already-adapted parameters."""
    if query.labels is None:
        raise ValueError("query batch needs labels")
    drop_off = deterministic or not training
    need_kl = mode in (FULL, KL_FIXED_VARIANCE)
    if need_kl:
        both = support.concat(query)
        g = encode_posterior(adapted, both, cfg, generator, drop_off)
        ns = len(support)
        g_s = DiagGaussian(g.mu[:ns], g.log_sigma[:ns])
        g_q = DiagGaussian(g.mu[ns:], g.log_sigma[ns:])
    else:
        g_q = encode_posterior(adapted, query, cfg, generator, drop_off)
    z = _latent(g_q, mode, training, deterministic, generator)
    probs = decode(adapted, z)
    nll = -_safe_log(probs.gather(-1, query.labels[:, None])).mean()
    if not need_kl:
        return nll, torch.zeros((), dtype=diffcore.DTYPE)
    q_pool, s_pool = pool_set(g_q), pool_set(g_s)
    if mode == KL_FIXED_VARIANCE:
        q_pool, s_pool = q_pool.fixed_variance(), s_pool.fixed_variance()
    return nll, kl_divergence(q_pool, s_pool)


def effective_lambda(lam: float, mode: str) -> float:
    return 0.0 if mode in (MAML, STOCHASTIC_MAML) else lam


def episode_loss(params: ParamSet, episode: EpisodeBatch, cfg: EncoderConfig, lam: float,
                 mode: str = FULL, generator: torch.Generator | None = None, beta: float = 0.3,
                 inner_steps: int = 1, training: bool = True, deterministic: bool = False,
                 create_graph: bool = False) -> torch.Tensor:
    adapted = adapt_params(params, episode.support, cfg, beta, inner_steps, mode, training,
                           deterministic, generator, create_graph)
    nll, kl = query_terms(adapted, episode.support, episode.query, cfg, mode, training,
                          deterministic, generator)
    return nll + effective_lambda(lam, mode) * kl


def maml_episode_loss(params: ParamSet, episode: EpisodeBatch, cfg: EncoderConfig, beta: float,
                      inner_steps: int) -> torch.Tensor:
    """Entropy-adapted MAML cross-entropy, deterministic, written without the latent module.

    The decoder reads the mean head directly; used as the reference that the
    full objective must reproduce at ``lam = 0`` with deterministic latents.
    """

    def logits(p, batch):
        h = encode_pairs(p, batch, cfg, None, True)
        mean = h @ p["enc/mu_w"] + p["enc/mu_b"]
        return mean @ p["dec/w"] + p["dec/b"]

    p = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    names = sorted(p)
    for _ in range(inner_steps):
        with torch.enable_grad():
            lg = logits(p, episode.support)
            h = -(F.softmax(lg, -1) * F.log_softmax(lg, -1)).sum(-1).mean()
            grads = torch.autograd.grad(h, [p[k] for k in names], allow_unused=True)
        p = {k: (p[k] - beta * (g if g is not None else 0.0)).detach().requires_grad_(True)
             for k, g in zip(names, grads)}
    with torch.no_grad():
        return F.cross_entropy(logits(p, episode.query), episode.query.labels)


# --------------------------------------------------------------- outer step

def meta_gradient(params: ParamSet, inner_loss: Callable[[ParamSet], torch.Tensor],
                  outer_loss: Callable[[ParamSet], torch.Tensor], beta: float, inner_steps: int,
                  order: str = "first") -> tuple[float, dict[str, torch.Tensor]]:
    """Gradient of ``outer_loss(adapt(params))`` with respect to the base parameters.

    ``order="second"`` differentiates through the inner updates;
    ``order="first"`` treats the adapted parameters as leaves, i.e. replaces
    the inner Jacobian with the identity.
    """
    if order == "second":
        base = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
        p = base
        with torch.enable_grad():
            for _ in range(inner_steps):
                _, g = diffcore.gradient(inner_loss, p, create_graph=True, wrt=p)
                p = diffcore.sgd_step(p, g, beta)
        loss, grads = diffcore.gradient(outer_loss, p, wrt=base)
        return float(loss), grads
    p = {k: v.detach() for k, v in params.items()}
    for _ in range(inner_steps):
        _, g = diffcore.gradient(inner_loss, p)
        p = diffcore.sgd_step(p, g, beta)
    loss, grads = diffcore.gradient(outer_loss, p)
    return float(loss), grads


def episode_gradient(params: ParamSet, episode: EpisodeBatch, enc_cfg: EncoderConfig, cfg: MetaConfig,
                     generator: torch.Generator | None) -> tuple[float, dict[str, torch.Tensor]]:
    inner = lambda p: support_entropy_loss(p, episode.support, enc_cfg, cfg.mode, True, False, generator)

    def outer(p):
        nll, kl = query_terms(p, episode.support, episode.query, enc_cfg, cfg.mode, True, False, generator)
        return nll + effective_lambda(cfg.lam, cfg.mode) * kl

    try:
        return meta_gradient(params, inner, outer, cfg.beta, cfg.inner_steps, cfg.order)
    except NonFiniteError as exc:
        raise NonFiniteError(f"episode loss ({episode.category_id})", exc.value) from None


def meta_step(params: ParamSet, episodes: Sequence[EpisodeBatch], enc_cfg: EncoderConfig, cfg: MetaConfig,
              state: AdamState, generators: Sequence[torch.Generator | None]):
    """One Adam update on the summed episode gradients; returns (params, state, batch loss)."""
    if not episodes:
        raise ValueError("meta-batch is empty")
    work = lambda i: episode_gradient(params, episodes[i], enc_cfg, cfg, generators[i])
    if cfg.workers > 1 and len(episodes) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(work, range(len(episodes))))
    else:
        results = [work(i) for i in range(len(episodes))]
    total = diffcore.zeros_like(params)
    loss = 0.0
    for ep_loss, g in results:  # fixed episode order
        total = diffcore.add_grads(total, g)
        loss += ep_loss
    if not np.isfinite(loss):
        raise NonFiniteError("batch loss", loss)
    new_params, new_state = diffcore.adam_step(params, total, state, cfg.alpha)
    return new_params, new_state, loss


# -------------------------------------------------------------- prediction

def predict(params: ParamSet, support: EncodedBatch, query: EncodedBatch, enc_cfg: EncoderConfig,
            beta: float, inner_steps: int) -> np.ndarray:
    """p_incorrect per query record after deterministic adaptation on ``support``."""
    adapted = adapt_params(params, support, enc_cfg, beta, inner_steps, training=False, deterministic=True)
    return score(adapted, query, enc_cfg)


def score(params: ParamSet, batch: EncodedBatch, enc_cfg: EncoderConfig) -> np.ndarray:
    """p_incorrect from the posterior mean, no adaptation, dropout off."""
    with torch.no_grad():
        g = encode_posterior(params, batch, enc_cfg, None, True)
        return decode(params, g.mu)[:, 1].numpy().copy()


# ----------------------------------------------------------------- training

def fixed_episodes(part: Mapping[str, Sequence[ProductRecord]], vocab: Vocab, enc_cfg: EncoderConfig,
                   n_support: int, n_query: int | None, seed: int, tag: str) -> dict[str, EpisodeBatch]:
    return {c: EpisodeBatch.from_episode(sample_episode(part, c, n_support, n_query, derive_seed(seed, tag)),
                                         vocab, enc_cfg)
            for c in sorted(part)}


def evaluate_episodes(params: ParamSet, episodes: Mapping[str, EpisodeBatch], enc_cfg: EncoderConfig,
                      cfg: MetaConfig) -> tuple[np.ndarray, np.ndarray]:
    scores, labels = [], []
    for c in sorted(episodes):
        ep = episodes[c]
        scores.append(predict(params, ep.support, ep.query, enc_cfg, cfg.beta, cfg.inner_steps))
        labels.append(ep.query.labels.numpy())
    return np.concatenate(scores), np.concatenate(labels)


@dataclass
class TrainResult:
    best_params: ParamSet
    final_params: ParamSet
    init_params: ParamSet
    history: list[dict]
    best_epoch: int


def train(cfg: MetaConfig, split: DatasetSplit, vocab: Vocab, enc_cfg: EncoderConfig,
          params: ParamSet | None = None, on_epoch: Callable[[dict], None] | None = None,
          monitor: Callable[[int, ParamSet], None] | None = None) -> TrainResult:
    """Meta-train, keeping the parameters with the best validation PR-AUC.

    Each epoch runs ``steps_per_epoch`` meta-steps; each step draws
    ``meta_batch`` training categories (with replacement when fewer exist)
    and one episode per drawn category.  ``on_epoch`` receives each history
    record; ``monitor`` receives the epoch number and current parameters.
    """
    from .encoder import init_params

    if not split.train:
        raise ValueError("training split has no categories")
    if params is None:
        params = init_params(len(vocab), enc_cfg, derive_seed(cfg.seed, "init"))
    init = diffcore.detach(params)
    cats = sorted(split.train)
    train_eps = None
    if not cfg.resample_episodes:
        train_eps = fixed_episodes(split.train, vocab, enc_cfg, cfg.n_support, cfg.n_query, cfg.seed, "train")
    val_eps = fixed_episodes(split.val, vocab, enc_cfg, cfg.n_support, cfg.n_query_eval, cfg.seed, "val") \
        if split.val else {}
    state = AdamState.init(params)
    best, best_auc, best_epoch = init, -np.inf, 0
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for _ in range(cfg.steps_per_epoch):
            rng = numpy_rng(cfg.seed, "batch", step)
            replace_ = len(cats) < cfg.meta_batch
            picks = [cats[i] for i in rng.choice(len(cats), size=cfg.meta_batch, replace=replace_)]
            if train_eps is not None:
                batch = [train_eps[c] for c in picks]
            else:
                batch = [EpisodeBatch.from_episode(
                    sample_episode(split.train, c, cfg.n_support, cfg.n_query,
                                   derive_seed(cfg.seed, "resample", step, j)), vocab, enc_cfg)
                    for j, c in enumerate(picks)]
            gens = [torch_generator(cfg.seed, "noise", step, j) for j in range(len(batch))]
            params, state, loss = meta_step(params, batch, enc_cfg, cfg, state, gens)
            losses.append(loss)
            step += 1
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_eps:
            s, y = evaluate_episodes(params, val_eps, enc_cfg, cfg)
            auc = pr_auc(s, y)
            rec["val_pr_auc"] = auc
            improved = auc > best_auc
        else:
            improved = True
        if improved:
            best, best_auc, best_epoch = params, rec.get("val_pr_auc", best_auc), epoch
        rec["checkpoint"] = bool(improved)
        history.append(rec)
        log.debug("epoch %d loss %.4f val %.4f (%.1fs)", epoch, rec["train_loss"],
                  rec.get("val_pr_auc", float("nan")), time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(rec)
        if monitor is not None:
            monitor(epoch, params)
    return TrainResult(best, params, init, history, best_epoch)


def with_mode(cfg: MetaConfig, mode: str, **kw) -> MetaConfig:
    return replace(cfg, mode=mode, **kw)
