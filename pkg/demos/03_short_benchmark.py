# A short paired run on the synthetic benchmark: full objective versus the
# lam = 0 (MAML) variant, same data and seed.  About a minute and a half on one core;
# the acceptance suite runs the 100-epoch, 5-seed version.
import time

from metabridge.data import build_vocab, generate_synthetic, split_by_category
from metabridge.encoder import EncoderConfig
from metabridge.evaluation import evaluate_split
from metabridge.meta import MetaConfig, train

records = generate_synthetic(120, 110, seed=0)
split = split_by_category(records, (5, 1, 6), seed=0)  # 50 / 10 / 60 categories
vocab = build_vocab(records)
enc = EncoderConfig(max_len_profile=16, max_len_value=4)

for mode in ("full", "maml"):
    cfg = MetaConfig(alpha=1e-2, epochs=40, mode=mode, seed=0)
    t0 = time.time()
    res = train(cfg, split, vocab, enc)
    curve = [round(h["val_pr_auc"], 3) for h in res.history[9::10]]
    best = evaluate_split(res.best_params, split.test, vocab, enc, cfg, tag="test")
    final = evaluate_split(res.final_params, split.test, vocab, enc, cfg, tag="test")
    print(f"{mode:5s} val every 10 epochs {curve}  best epoch {res.best_epoch}")
    print(f"      test PR-AUC best-val ckpt {best['pr_auc']:.4f}  final {final['pr_auc']:.4f}  "
          f"R@P=0.9 {best['r_at_p']['0.9']:.3f}  ({time.time() - t0:.0f}s)")
