"""Dual-Transformer encoder with Gaussian heads, and the linear decoder.

Profile and value texts go through two separate single-block Transformer
encoders (unshared weights, shared word-embedding table).  The ``[CLS]``
states are concatenated and mapped by two linear heads to the mean and
log standard deviation of a diagonal Gaussian; the decoder is one linear
layer plus softmax over (correct, incorrect).

Sequences are always padded to the configured maximum length, so a record's
encoding never depends on which other records share its batch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import CLS_ID, PAD_ID, UNK_ID, DataError, ProductRecord, Vocab
from .diffcore import DTYPE, ParamSet, dropout, param_set
from .latent import LOG_SIGMA_MAX, LOG_SIGMA_MIN, DiagGaussian
from .seeding import derive_seed

INIT_SCALE = 0.1
LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 16
    n_heads: int = 2
    n_layers: int = 1
    ff_mult: int = 4
    dropout: float = 0.3
    max_len_profile: int = 64
    max_len_value: int = 16
    embed_dim: int | None = None  # None -> d_model; 300 for pretrained FastText-style vectors

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model ({self.d_model}) must be a positive multiple of n_heads ({self.n_heads})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.n_layers < 1 or self.ff_mult < 1:
            raise ValueError("n_layers and ff_mult must be positive")
        if self.max_len_profile < 1 or self.max_len_value < 1:
            raise ValueError("max lengths must be positive")

    @property
    def emb_dim(self) -> int:
        return self.embed_dim or self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EncodedBatch:
    """Token id matrices for a list of records, padded to the fixed max lengths."""

    profile: torch.Tensor  # (n, max_len_profile) int64
    value: torch.Tensor  # (n, max_len_value) int64
    labels: torch.Tensor | None = None  # (n,) int64

    def __len__(self) -> int:
        return self.profile.shape[0]

    def concat(self, other: "EncodedBatch") -> "EncodedBatch":
        labels = None
        if self.labels is not None and other.labels is not None:
            labels = torch.cat([self.labels, other.labels])
        return EncodedBatch(torch.cat([self.profile, other.profile]),
                            torch.cat([self.value, other.value]), labels)


def pad_ids(seqs: Sequence[Sequence[int]], max_len: int, vocab_size: int | None = None) -> torch.Tensor:
    out = torch.full((len(seqs), max_len), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        s = list(s)[:max_len]
        if not s:
            raise DataError("cannot encode an empty sequence")
        if s[0] != CLS_ID:
            raise DataError("encoded sequences must begin with [CLS]")
        if vocab_size is not None:
            s = [t if 0 <= t < vocab_size else UNK_ID for t in s]
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return out


def encode_records(vocab: Vocab, records: Sequence[ProductRecord], cfg: EncoderConfig,
                   with_labels: bool = True) -> EncodedBatch:
    prof = pad_ids([vocab.encode(r.profile) for r in records], cfg.max_len_profile)
    val = pad_ids([vocab.encode(r.value) for r in records], cfg.max_len_value)
    labels = None
    if with_labels and records and all(r.label is not None for r in records):
        labels = torch.tensor([int(r.label) for r in records], dtype=torch.long)
    return EncodedBatch(prof, val, labels)


# ------------------------------------------------------------------ params

def _block_shapes(prefix: str, d: int, ff: int) -> dict[str, tuple[int, ...]]:
    s = {}
    for m in ("q", "k", "v", "o"):
        s[f"{prefix}/attn_{m}_w"] = (d, d)
        s[f"{prefix}/attn_{m}_b"] = (d,)
    s[f"{prefix}/ln1_g"] = (d,)
    s[f"{prefix}/ln1_b"] = (d,)
    s[f"{prefix}/ff_w1"] = (d, ff)
    s[f"{prefix}/ff_b1"] = (ff,)
    s[f"{prefix}/ff_w2"] = (ff, d)
    s[f"{prefix}/ff_b2"] = (d,)
    s[f"{prefix}/ln2_g"] = (d,)
    s[f"{prefix}/ln2_b"] = (d,)
    return s


def param_shapes(vocab_size: int, cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    shapes = {"enc/embed": (vocab_size, cfg.emb_dim)}
    if cfg.emb_dim != d:
        shapes["enc/embed_proj"] = (cfg.emb_dim, d)
    for side in ("profile", "value"):
        for layer in range(cfg.n_layers):
            shapes.update(_block_shapes(f"enc/{side}/l{layer}", d, cfg.ff_mult * d))
    shapes["enc/mu_w"] = (2 * d, d)
    shapes["enc/mu_b"] = (d,)
    shapes["enc/logsigma_w"] = (2 * d, d)
    shapes["enc/logsigma_b"] = (d,)
    shapes["dec/w"] = (d, 2)
    shapes["dec/b"] = (2,)
    return shapes


def _uniform(seed: int, name: str, shape) -> torch.Tensor:
    rng = np.random.default_rng(derive_seed(seed, "init", *name.encode("utf-8")))
    return torch.from_numpy(rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)).to(DTYPE)


def init_params(vocab_size: int, cfg: EncoderConfig, seed: int = 0) -> ParamSet:
    """Uniform(-0.1, 0.1) weights, zero biases, unit layer-norm gains; one stream per name."""
    params = {}
    for name, shape in param_shapes(vocab_size, cfg).items():
        leaf = name.rsplit("/", 1)[-1]
        if leaf.endswith("_g"):
            params[name] = torch.ones(shape, dtype=DTYPE)
        elif leaf.endswith("_b") or leaf == "b" or (leaf.startswith("ff_b")):
            params[name] = torch.zeros(shape, dtype=DTYPE)
        else:
            params[name] = _uniform(seed, name, shape)
    return param_set(params)


def load_pretrained_embeddings(path: str | Path, vocab: Vocab, seed: int = 0,
                               name: str = "enc/embed") -> torch.Tensor:
    """Read a text embedding file (``count dim`` header, then ``token v1 .. v_dim``).

    Rows for tokens missing from the file keep the seeded uniform init, which
    is exactly what ``init_params`` would produce for the same name and seed.
    """
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2 or not all(h.isdigit() for h in header):
            raise DataError(f"bad embedding header in {path}: {' '.join(header)!r}")
        dim = int(header[1])
        table = _uniform(seed, name, (len(vocab), dim))
        for row, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").rstrip().split(" ")
            if not parts or not parts[0]:
                continue
            tok, vals = parts[0], parts[1:]
            if len(vals) != dim:
                raise DataError(f"embedding row {row} ({tok!r}) has {len(vals)} values, header says {dim}")
            if tok in vocab:
                table[vocab[tok]] = torch.tensor([float(v) for v in vals], dtype=DTYPE)
    return table


def with_embeddings(params: ParamSet, table: torch.Tensor, cfg: EncoderConfig, seed: int = 0) -> ParamSet:
    """Replace the embedding table; adds the learned projection when dims differ."""
    out = dict(params)
    out["enc/embed"] = table.to(DTYPE)
    if table.shape[1] != cfg.d_model:
        out["enc/embed_proj"] = _uniform(seed, "enc/embed_proj", (table.shape[1], cfg.d_model))
    else:
        out.pop("enc/embed_proj", None)
    return param_set(out)


# ------------------------------------------------------------------ layers

def layer_norm(x: torch.Tensor, g: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + LN_EPS) * g + b


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    x = x - x.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(x)
    return e / e.sum(dim=dim, keepdim=True)


_PE_CACHE: dict[tuple[int, int], torch.Tensor] = {}


def sinusoidal_positions(length: int, d: int) -> torch.Tensor:
    key = (length, d)
    if key not in _PE_CACHE:
        pos = np.arange(length)[:, None]
        i = np.arange(d)[None, :]
        angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
        pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
        _PE_CACHE[key] = torch.from_numpy(pe).to(DTYPE)
    return _PE_CACHE[key]


def _attention(p: ParamSet, pre: str, x: torch.Tensor, mask: torch.Tensor, n_heads: int,
               cls_only: bool) -> torch.Tensor:
    n, L, d = x.shape
    dh = d // n_heads
    xq = x[:, :1] if cls_only else x
    q = (xq @ p[f"{pre}/attn_q_w"] + p[f"{pre}/attn_q_b"]).view(n, -1, n_heads, dh).transpose(1, 2)
    k = (x @ p[f"{pre}/attn_k_w"] + p[f"{pre}/attn_k_b"]).view(n, L, n_heads, dh).transpose(1, 2)
    v = (x @ p[f"{pre}/attn_v_w"] + p[f"{pre}/attn_v_b"]).view(n, L, n_heads, dh).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
    att = softmax(scores, dim=-1)
    out = (att @ v).transpose(1, 2).reshape(n, -1, d)
    return out @ p[f"{pre}/attn_o_w"] + p[f"{pre}/attn_o_b"]


def encode_sequence(params: ParamSet, ids: torch.Tensor, which: str, cfg: EncoderConfig,
                    generator: torch.Generator | None = None, deterministic: bool = True) -> torch.Tensor:
    """Hidden state at ``[CLS]`` for each row of ``ids``: shape ``(n, d_model)``.

    ``ids`` is ``(n, L)`` or a single ``(L,)`` sequence; rows must start with
    ``[CLS]``.  Out-of-range ids are read as ``[UNK]``; rows longer than the
    side's maximum length are truncated.
    """
    if which not in ("profile", "value"):
        raise ValueError(f"which must be 'profile' or 'value', got {which!r}")
    single = ids.dim() == 1
    ids = ids[None] if single else ids
    if ids.shape[-1] == 0:
        raise DataError("cannot encode an empty sequence")
    if (ids[:, 0] != CLS_ID).any():
        raise DataError("encoded sequences must begin with [CLS]")
    max_len = cfg.max_len_profile if which == "profile" else cfg.max_len_value
    ids = ids[:, :max_len]
    if ids.shape[1] < max_len:
        ids = torch.cat([ids, torch.full((ids.shape[0], max_len - ids.shape[1]), PAD_ID, dtype=ids.dtype)], 1)
    vocab_size = params["enc/embed"].shape[0]
    ids = torch.where((ids >= 0) & (ids < vocab_size), ids, torch.full_like(ids, UNK_ID))
    mask = ids != PAD_ID
    d = cfg.d_model
    x = params["enc/embed"][ids]
    if "enc/embed_proj" in params:
        x = x @ params["enc/embed_proj"]
    x = x * math.sqrt(d) + sinusoidal_positions(max_len, d)
    x = dropout(x, cfg.dropout, generator, deterministic)
    for layer in range(cfg.n_layers):
        pre = f"enc/{which}/l{layer}"
        last = layer == cfg.n_layers - 1
        a = _attention(params, pre, x, mask, cfg.n_heads, cls_only=last)
        resid = x[:, :1] if last else x
        h = layer_norm(resid + dropout(a, cfg.dropout, generator, deterministic),
                       params[f"{pre}/ln1_g"], params[f"{pre}/ln1_b"])
        f = torch.relu(h @ params[f"{pre}/ff_w1"] + params[f"{pre}/ff_b1"]) @ params[f"{pre}/ff_w2"] \
            + params[f"{pre}/ff_b2"]
        x = layer_norm(h + dropout(f, cfg.dropout, generator, deterministic),
                       params[f"{pre}/ln2_g"], params[f"{pre}/ln2_b"])
    out = x[:, 0]
    return out[0] if single else out


def encode_pairs(params: ParamSet, batch: EncodedBatch, cfg: EncoderConfig,
                 generator: torch.Generator | None = None, deterministic: bool = True) -> torch.Tensor:
    """Concatenated ``[CLS]`` states ``(n, 2*d_model)``: profile first, then value."""
    hp = encode_sequence(params, batch.profile, "profile", cfg, generator, deterministic)
    hv = encode_sequence(params, batch.value, "value", cfg, generator, deterministic)
    return torch.cat([hp, hv], dim=-1)


def gaussian_head(params: ParamSet, h: torch.Tensor) -> DiagGaussian:
    """Linear mean and log-sigma heads; log-sigma is clamped to [-6, 6]."""
    if h.shape[-1] != params["enc/mu_w"].shape[0]:
        raise ValueError(f"expected input width {params['enc/mu_w'].shape[0]}, got {h.shape[-1]}")
    mu = h @ params["enc/mu_w"] + params["enc/mu_b"]
    raw = h @ params["enc/logsigma_w"] + params["enc/logsigma_b"]
    return DiagGaussian(mu, torch.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX))


def decoder_logits(params: ParamSet, z: torch.Tensor) -> torch.Tensor:
    return z @ params["dec/w"] + params["dec/b"]


def decode(params: ParamSet, z: torch.Tensor) -> torch.Tensor:
    """Class probabilities ``(..., 2)`` ordered (p_correct, p_incorrect)."""
    return softmax(decoder_logits(params, z), dim=-1)


def encode_posterior(params: ParamSet, batch: EncodedBatch, cfg: EncoderConfig,
                     generator: torch.Generator | None = None, deterministic: bool = True) -> DiagGaussian:
    return gaussian_head(params, encode_pairs(params, batch, cfg, generator, deterministic))
