# Test-time adaptation on one category: entropy of the unlabeled support set
# before and after a gradient step, and the resulting query scores.
from metabridge.data import build_vocab, generate_synthetic, group_by_category, sample_episode
from metabridge.encoder import EncoderConfig, encode_records, init_params
from metabridge.meta import adapt, predict, support_entropy_loss
from metabridge.metrics import pr_auc

records = generate_synthetic(n_categories=3, products_per_category=60, seed=0)
vocab = build_vocab(records)
print(len(records), "records,", len(vocab), "tokens")
print("one record:", records[0].to_json())

part = group_by_category(records)
ep = sample_episode(part, "cat000", n_support=40, n_query=None, seed=0)
print(len(ep.support), "unlabeled support,", len(ep.query), "labeled query")

cfg = EncoderConfig(max_len_profile=16, max_len_value=4)
params = init_params(len(vocab), cfg, seed=0)
support = encode_records(vocab, ep.support, cfg, with_labels=False)
query = encode_records(vocab, ep.query, cfg)

# one step of size beta on the mean prediction entropy, all parameters
for beta in (1e-3, 0.3, 3.0):
    adapted = adapt(params, support, cfg, beta, inner_steps=1).params
    before = float(support_entropy_loss(params, support, cfg, deterministic=True))
    after = float(support_entropy_loss(adapted, support, cfg, deterministic=True))
    print(f"beta {beta:<6} support entropy {before:.6f} -> {after:.6f}")

# an untrained model ranks close to chance
scores = predict(params, support, query, cfg, beta=0.3, inner_steps=1)
print("scores", scores[:5].round(4), "...  PR-AUC", round(pr_auc(scores, query.labels.numpy()), 4))
