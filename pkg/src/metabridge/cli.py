"""Command-line entry point: synth, train, eval, adapt, infer.

Every command writes its outputs under ``--out`` together with a
``manifest.json`` that echoes the resolved configuration, the tool
version and SHA-256 digests of inputs and outputs.  Nothing
time-dependent is written, so identical inputs give identical bytes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .config import SCHEMA, ConfigError, RunConfig, parse_value
from .data import (DataError, Vocab, build_vocab, generate_synthetic, group_by_category, load_jsonl,
                   split_by_category, write_jsonl)
from .diffcore import CheckpointError, load_checkpoint, save_checkpoint
from .encoder import encode_records, init_params, load_pretrained_embeddings, with_embeddings
from .evaluation import evaluate_split
from .meta import adapt, score, train
from .metrics import MetricError
from .seeding import derive_seed

TOOL = "metabridge"
log = logging.getLogger(TOOL)


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n")


def tool_info() -> dict:
    return {"name": TOOL, "version": __version__}


def write_manifest(out: Path, command: str, config: dict, inputs: dict[str, Path]) -> None:
    outputs = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    dump_json({
        "tool": tool_info(),
        "command": command,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": sha256(v)} for k, v in sorted(inputs.items())},
        "outputs": {p.relative_to(out).as_posix(): sha256(p) for p in outputs},
    }, out / "manifest.json")


def _overrides(ns: argparse.Namespace) -> dict:
    return {k: parse_value(k, v) for k, v in vars(ns).items() if k in SCHEMA and v is not None}


def _save_model(path: Path, params, vocab: Vocab, config: dict) -> None:
    save_checkpoint(path, params, config)
    vocab.save(path / "vocab.txt")


def _load_model(path: Path):
    params, meta = load_checkpoint(path)
    if "run_config" not in meta:
        raise CheckpointError(f"{path} has no run configuration in config.json")
    vocab_path = path / "vocab.txt"
    if not vocab_path.exists():
        raise CheckpointError(f"{path} has no vocab.txt")
    return params, Vocab.load(vocab_path), meta


def _stored_config(meta: dict, overrides: dict | None = None) -> RunConfig:
    stored = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["run_config"].items()}
    return RunConfig({**stored, **(overrides or {})})


def _load_split(cfg: RunConfig):
    data = cfg["data.path"]
    if not data:
        raise ConfigError("no data file: pass --data or set data.path")
    records = load_jsonl(data)
    return records, split_by_category(records, cfg["data.split_ratio"], cfg["data.split_seed"])


# ----------------------------------------------------------------- commands

def cmd_synth(ns: argparse.Namespace) -> int:
    if not 0.0 <= ns.noise < 0.5:
        raise DataError(f"--noise must lie in [0, 0.5), got {ns.noise}")
    records = generate_synthetic(ns.categories, ns.per_category, vocab_size=ns.vocab_size, noise_rate=ns.noise,
                                 seed=ns.seed, mismatch_fraction=ns.mismatch_fraction)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(records, out / "records.jsonl")
    params = {"categories": ns.categories, "per_category": ns.per_category, "vocab_size": ns.vocab_size,
              "noise": ns.noise, "mismatch_fraction": ns.mismatch_fraction, "seed": ns.seed}
    params["n_records"] = len(records)
    params["n_categories"] = len(group_by_category(records))
    write_manifest(out, "synth", params, {})
    print(f"wrote {len(records)} records in {params['n_categories']} categories to {out / 'records.jsonl'}")
    return 0


def cmd_train(ns: argparse.Namespace) -> int:
    over = _overrides(ns)
    if ns.data:
        over["data.path"] = ns.data
    cfg = RunConfig.load(ns.config, over)
    records, split = _load_split(cfg)
    vocab = build_vocab(records, cfg["data.vocab_min_freq"])
    init_seed = derive_seed(cfg["meta.seed"], "init")
    params = None
    if cfg["data.embeddings"]:
        table = load_pretrained_embeddings(cfg["data.embeddings"], vocab, seed=init_seed)
        if cfg["encoder.embed_dim"] not in (None, table.shape[1]):
            raise ConfigError(f"encoder.embed_dim={cfg['encoder.embed_dim']} but embeddings have dim {table.shape[1]}")
        cfg = cfg.replace(encoder__embed_dim=int(table.shape[1]))
        params = with_embeddings(init_params(len(vocab), cfg.encoder(), init_seed), table, cfg.encoder(), init_seed)
    enc_cfg, meta_cfg = cfg.encoder(), cfg.meta(workers=ns.threads)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    hist_path = out / "history.jsonl"

    with open(hist_path, "w", encoding="utf-8", newline="\n") as hist:
        def on_epoch(rec):
            hist.write(json.dumps(rec, sort_keys=True) + "\n")
            hist.flush()
            log.info("epoch %d  loss %.5f  val PR-AUC %s", rec["epoch"], rec["train_loss"],
                     f"{rec['val_pr_auc']:.4f}" if "val_pr_auc" in rec else "n/a")

        res = train(meta_cfg, split, vocab, enc_cfg, params=params, on_epoch=on_epoch)

    echo = cfg.to_dict()
    base = {"tool": tool_info(), "run_config": echo,
            "split": {p: sorted(split.part(p)) for p in ("train", "val", "test")}}
    _save_model(out / "best", res.best_params, vocab, {**base, "kind": "best", "epoch": res.best_epoch})
    _save_model(out / "final", res.final_params, vocab, {**base, "kind": "final", "epoch": meta_cfg.epochs})
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8", newline="\n")
    inputs = {"data": Path(cfg["data.path"])}
    if cfg["data.embeddings"]:
        inputs["embeddings"] = Path(cfg["data.embeddings"])
    write_manifest(out, "train", echo, inputs)
    print(f"trained {meta_cfg.epochs} epochs; best epoch {res.best_epoch}; checkpoints in {out}")
    return 0


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std()) if arr.size > 1 else 0.0


def cmd_eval(ns: argparse.Namespace) -> int:
    ckpt = Path(ns.ckpt)
    params, vocab, meta = _load_model(ckpt)
    over = _overrides(ns)
    if ns.data:
        over["data.path"] = ns.data
    if ns.repeats is not None:
        over["eval.repeats"] = ns.repeats
    if ns.r_at_p is not None:
        over["eval.r_at_p"] = parse_value("eval.r_at_p", ns.r_at_p)
    cfg = _stored_config(meta, over)
    _, split = _load_split(cfg)
    part = split.part(ns.split)
    if not part:
        raise DataError(f"split part {ns.split!r} has no categories")
    enc_cfg, meta_cfg = cfg.encoder(), cfg.meta()
    base_seed = meta_cfg.seed if ns.seed is None else ns.seed
    runs, dumps = [], []
    for i in range(cfg["eval.repeats"]):
        rep = evaluate_split(params, part, vocab, enc_cfg, meta_cfg, seed=base_seed + i,
                             grid=cfg["eval.r_at_p"], tag=f"eval/{ns.split}")
        runs.append(rep)
        dumps.extend({"repeat": i, **d} for d in rep["scores"])
    grid_keys = list(runs[0]["r_at_p"])
    auc_mean, auc_std = _mean_std([r["pr_auc"] for r in runs])
    r_stats = {k: _mean_std([r["r_at_p"][k] for r in runs]) for k in grid_keys}
    report = {
        "tool": tool_info(),
        "checkpoint": {"path": str(ckpt), "sha256": sha256(ckpt / "tensors.bin"), "kind": meta.get("kind")},
        "split": ns.split,
        "seed": base_seed,
        "repeats": len(runs),
        "auc_kind": runs[0]["auc_kind"],
        "pr_auc": auc_mean,
        "pr_auc_std": auc_std,
        "r_at_p": {k: m for k, (m, _) in r_stats.items()},
        "r_at_p_std": {k: s for k, (_, s) in r_stats.items()},
        "per_category": runs[0]["per_category"],
        "runs": [{"seed": r["seed"], "pr_auc": r["pr_auc"], "r_at_p": r["r_at_p"],
                  "macro_pr_auc": r["macro_pr_auc"]} for r in runs],
        "config": cfg.to_dict(),
    }
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(report, out / "metrics.json")
    if ns.dump_scores:
        with open(out / ns.dump_scores, "w", encoding="utf-8", newline="\n") as fh:
            for d in dumps:
                fh.write(json.dumps(d, sort_keys=True) + "\n")
    write_manifest(out, "eval", cfg.to_dict(), {"data": Path(cfg["data.path"]), "checkpoint": ckpt / "tensors.bin"})
    print(f"PR-AUC {auc_mean:.4f} ± {auc_std:.4f} over {len(runs)} repeat(s)")
    for k in grid_keys:
        m, s = r_stats[k]
        print(f"R@P={k}  {m:.4f} ± {s:.4f}")
    return 0


def cmd_adapt(ns: argparse.Namespace) -> int:
    ckpt = Path(ns.ckpt)
    params, vocab, meta = _load_model(ckpt)
    support = load_jsonl(ns.support)
    if not support:
        raise DataError(f"support file {ns.support} has no records")
    cfg = _stored_config(meta, _overrides(ns))
    steps = cfg["meta.inner_steps"] if ns.inner_steps is None else ns.inner_steps
    if steps < 0:
        raise ConfigError("--inner-steps must be >= 0")
    beta = cfg["meta.beta"]
    enc_cfg = cfg.encoder()
    batch = encode_records(vocab, support, enc_cfg, with_labels=False)
    cats = sorted({r.category_id for r in support})
    model = adapt(params, batch, enc_cfg, beta, steps, category_id=",".join(cats),
                  base_id=sha256(ckpt / "tensors.bin"))
    out = Path(ns.out)
    provenance = {**model.provenance, "support_sha256": sha256(Path(ns.support)), "categories": cats,
                  "n_support": len(support)}
    _save_model(out, model.params, vocab, {"tool": tool_info(), "run_config": cfg.to_dict(), "kind": "adapted",
                                           "provenance": provenance})
    write_manifest(out, "adapt", cfg.to_dict(), {"checkpoint": ckpt / "tensors.bin", "support": Path(ns.support)})
    print(f"adapted on {len(support)} support records ({steps} step(s), beta={beta}); wrote {out}")
    return 0


def cmd_infer(ns: argparse.Namespace) -> int:
    params, vocab, meta = _load_model(Path(ns.ckpt))
    cfg = _stored_config(meta)
    records = load_jsonl(ns.input)
    output = Path(ns.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    scores = score(params, encode_records(vocab, records, cfg.encoder(), with_labels=False), cfg.encoder()) \
        if records else []
    with open(output, "w", encoding="utf-8", newline="\n") as fh:
        for r, s in zip(records, scores):
            fh.write(json.dumps({"category": r.category_id, "product_id": r.product_id,
                                 "p_incorrect": float(s)}, sort_keys=True) + "\n")
    print(f"scored {len(records)} records into {output}")
    return 0


# ------------------------------------------------------------------ parser

def _add_schema_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides")
    for key in sorted(SCHEMA):
        g.add_argument(f"--{key}", dest=key, metavar="VALUE", default=None)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=TOOL, description="Few-shot attribute validation with meta-learned latents.")
    p.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic attribute-validation corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--categories", type=int, default=120)
    s.add_argument("--per-category", type=int, default=110)
    s.add_argument("--vocab-size", type=int, default=30)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--mismatch-fraction", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="meta-train and write best/final checkpoints")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--threads", type=int, default=1, help="episode workers; results do not depend on it")
    _add_schema_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="adapt-then-predict on a split part and report PR-AUC and R@P")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--r-at-p", dest="r_at_p")
    e.add_argument("--repeats", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)
    e.add_argument("--dump-scores", metavar="FILE", help="also write per-record scores (JSONL) under --out")
    _add_schema_flags(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("adapt", help="adapt a checkpoint to one category's unlabeled support set")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--support", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--inner-steps", type=int)
    _add_schema_flags(a)
    a.set_defaults(func=cmd_adapt)

    i = sub.add_parser("infer", help="score records with an (adapted) checkpoint, no adaptation")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.set_defaults(func=cmd_infer)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr, force=True)
    # intra-op threading would make float reductions depend on the thread count
    torch.set_num_threads(1)
    try:
        return ns.func(ns)
    except (ConfigError, DataError, CheckpointError, MetricError, FloatingPointError, OSError, ValueError) as exc:
        print(f"{TOOL}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
