"""Run configuration: flat ``key = value`` files with dotted keys.

Every key belongs to a fixed schema; unknown keys and unparsable values
are rejected.  Command-line flags of the form ``--meta.alpha 0.01``
override file values.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Any, Callable, Mapping

from .encoder import EncoderConfig
from .meta import MetaConfig
from .metrics import R_AT_P_GRID


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(conv: Callable[[str], Any]) -> Callable[[str], Any]:
    return lambda text: None if text.strip().lower() in ("", "none", "null") else conv(text)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(" ", "").split(",") if t)


def _strict_int(text: str) -> int:
    return int(str(text).strip())


_META_TYPES = {"alpha": float, "beta": float, "lam": float, "inner_steps": _strict_int,
               "meta_batch": _strict_int, "epochs": _strict_int, "n_support": _strict_int,
               "n_query": _strict_int, "n_query_eval": _optional(_strict_int), "order": str, "mode": str,
               "resample_episodes": _bool, "steps_per_epoch": _strict_int, "seed": _strict_int}
_ENCODER_TYPES = {"d_model": _strict_int, "n_heads": _strict_int, "n_layers": _strict_int,
                  "ff_mult": _strict_int, "dropout": float, "max_len_profile": _strict_int,
                  "max_len_value": _strict_int, "embed_dim": _optional(_strict_int)}

SCHEMA: dict[str, Callable[[str], Any]] = {
    **{f"meta.{k}": v for k, v in _META_TYPES.items()},
    **{f"encoder.{k}": v for k, v in _ENCODER_TYPES.items()},
    "data.path": _optional(str),
    "data.split_ratio": _int_list,
    "data.split_seed": _strict_int,
    "data.embeddings": _optional(str),
    "data.vocab_min_freq": _strict_int,
    "eval.repeats": _strict_int,
    "eval.r_at_p": _float_list,
}

_META_DEFAULTS = {f.name: getattr(MetaConfig(), f.name) for f in fields(MetaConfig)}
_ENCODER_DEFAULTS = {f.name: getattr(EncoderConfig(), f.name) for f in fields(EncoderConfig)}

DEFAULTS: dict[str, Any] = {
    **{f"meta.{k}": _META_DEFAULTS[k] for k in _META_TYPES},
    **{f"encoder.{k}": _ENCODER_DEFAULTS[k] for k in _ENCODER_TYPES},
    "data.path": None,
    "data.split_ratio": (3, 1, 6),
    "data.split_seed": 0,
    "data.embeddings": None,
    "data.vocab_min_freq": 1,
    "eval.repeats": 5,
    "eval.r_at_p": R_AT_P_GRID,
}


def parse_value(key: str, text: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return SCHEMA[key](text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{path}:{n}: duplicate key {key!r}")
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{n}: {exc}") from None
    return out


class RunConfig:
    """Resolved flat configuration with typed accessors for the library configs."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            self.values[k] = v
        self.validate()

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        values = read_config_file(path) if path else {}
        values.update(overrides or {})
        return cls(values)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def replace(self, **dotted: Any) -> "RunConfig":
        vals = dict(self.values)
        vals.update({k.replace("__", "."): v for k, v in dotted.items()})
        return RunConfig(vals)

    def validate(self) -> None:
        try:
            self.meta()
            self.encoder()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        ratio = self.values["data.split_ratio"]
        if len(ratio) != 3 or any(r < 0 for r in ratio) or sum(ratio) == 0:
            raise ConfigError(f"data.split_ratio must be three non-negative integers, got {ratio}")
        if self.values["eval.repeats"] < 1:
            raise ConfigError("eval.repeats must be >= 1")
        if any(not 0 < p <= 1 for p in self.values["eval.r_at_p"]):
            raise ConfigError("eval.r_at_p values must lie in (0, 1]")

    def meta(self, workers: int = 1) -> MetaConfig:
        return MetaConfig(**{k: self.values[f"meta.{k}"] for k in _META_TYPES}, workers=workers)

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(**{k: self.values[f"encoder.{k}"] for k in _ENCODER_TYPES})

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.values.items())}

    def to_text(self) -> str:
        def fmt(v):
            if v is None:
                return "none"
            if isinstance(v, (tuple, list)):
                return ",".join(str(x) for x in v)
            return str(v).lower() if isinstance(v, bool) else str(v)
        return "".join(f"{k} = {fmt(v)}\n" for k, v in sorted(self.values.items()))
