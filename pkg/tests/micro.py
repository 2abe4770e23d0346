"""Tiny models and episodes shared by the meta, acceptance and CLI tests."""

import numpy as np
import torch

from metabridge.data import CLS_ID
from metabridge.encoder import EncodedBatch, EncoderConfig, init_params, pad_ids
from metabridge.meta import EpisodeBatch

MICRO = EncoderConfig(d_model=4, n_heads=2, n_layers=1, max_len_profile=6, max_len_value=3)
VOCAB = 20


def micro_params(seed=0, cfg=MICRO):
    return init_params(VOCAB, cfg, seed=seed)


def random_batch(n, rng, labeled=True, cfg=MICRO):
    prof = [[CLS_ID, *rng.integers(3, VOCAB, rng.integers(1, cfg.max_len_profile))] for _ in range(n)]
    val = [[CLS_ID, *rng.integers(3, VOCAB, rng.integers(1, cfg.max_len_value))] for _ in range(n)]
    labels = torch.from_numpy(rng.integers(0, 2, n)) if labeled else None
    return EncodedBatch(pad_ids(prof, cfg.max_len_profile), pad_ids(val, cfg.max_len_value), labels)


def random_episode(seed, n_support=4, n_query=2, cfg=MICRO, category="c"):
    rng = np.random.default_rng(seed)
    return EpisodeBatch(category, random_batch(n_support, rng, False, cfg), random_batch(n_query, rng, True, cfg))
