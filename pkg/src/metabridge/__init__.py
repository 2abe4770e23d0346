"""Few-shot textual attribute validation with a meta-learned latent-variable model."""

from .data import (DatasetSplit, Episode, ProductRecord, Vocab, build_vocab, generate_synthetic,
                   load_jsonl, sample_episode, split_by_category, write_jsonl)
from .diffcore import AdamState, adam_step, gradient, load_checkpoint, save_checkpoint, sgd_step
from .encoder import EncoderConfig, decode, encode_posterior, encode_records, gaussian_head, init_params
from .latent import DiagGaussian, deterministic_latent, kl_divergence, pool_set, reparameterize
from .meta import (MetaConfig, adapt, episode_loss, meta_step, predict, support_entropy_loss, train)
from .metrics import pr_auc, recall_at_precision

__version__ = "0.1.0"
