"""Parameter sets, exact gradients, optimizers and checkpoint files.

Reverse-mode differentiation is delegated to ``torch.autograd`` in float64.
A parameter set is a plain ``dict`` of name -> tensor kept in lexicographic
key order; names under ``enc/`` are encoder and Gaussian-head parameters,
names under ``dec/`` the decoder.

Higher-order mode: when ``gradient(..., create_graph=True)`` is used, the
returned gradients stay attached to the graph, so ``sgd_step`` applied to
them yields parameters that are differentiable functions of the inputs.
Otherwise gradients come back detached and ``sgd_step`` output is constant
with respect to the pre-step parameters.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

DTYPE = torch.float64
ParamSet = dict[str, torch.Tensor]
GradMap = dict[str, torch.Tensor]


class NonFiniteError(FloatingPointError):
    def __init__(self, what: str, value):
        super().__init__(f"non-finite {what}: {value}")
        self.value = value


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def param_set(items: Mapping[str, torch.Tensor]) -> ParamSet:
    """Return a new parameter set in lexicographic name order."""
    return {k: items[k] for k in sorted(items)}


def encoder_part(params: Mapping[str, torch.Tensor]) -> ParamSet:
    return {k: v for k, v in params.items() if k.startswith("enc/")}


def decoder_part(params: Mapping[str, torch.Tensor]) -> ParamSet:
    return {k: v for k, v in params.items() if k.startswith("dec/")}


def detach(params: Mapping[str, torch.Tensor], requires_grad: bool = False) -> ParamSet:
    return {k: v.detach().clone().requires_grad_(requires_grad) for k, v in params.items()}


def zeros_like(params: Mapping[str, torch.Tensor]) -> GradMap:
    return {k: torch.zeros_like(v, dtype=DTYPE).detach() for k, v in params.items()}


def gradient(fn: Callable[[ParamSet], torch.Tensor], params: Mapping[str, torch.Tensor],
             create_graph: bool = False, wrt: Mapping[str, torch.Tensor] | None = None):
    """Evaluate ``fn(params)`` and its exact gradient.

    ``wrt`` selects the tensors to differentiate with respect to (defaults
    to ``params`` itself, re-leafed so the caller's tensors are untouched).
    Parameters the loss does not depend on receive exact zeros.
    """
    if wrt is None:
        leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
        inputs = leaves
    else:
        leaves = dict(params)
        inputs = dict(wrt)
    with torch.enable_grad():
        loss = fn(leaves)
        if loss.numel() != 1:
            raise ShapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
        if not torch.isfinite(loss):
            raise NonFiniteError("loss", loss.item())
        names = list(inputs)
        grads = torch.autograd.grad(loss, [inputs[k] for k in names], create_graph=create_graph,
                                    allow_unused=True)
    out = {}
    for k, g in zip(names, grads):
        if g is None:
            g = torch.zeros_like(inputs[k])
        out[k] = g if create_graph else g.detach()
    return (loss if create_graph else loss.detach()), out


def _check_shapes(a: Mapping[str, torch.Tensor], b: Mapping[str, torch.Tensor], what: str):
    if set(a) != set(b):
        missing = sorted(set(a) ^ set(b))
        raise ShapeError(f"{what}: parameter names differ: {missing[:5]}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ShapeError(f"{what}: shape mismatch for {k}: {tuple(a[k].shape)} vs {tuple(b[k].shape)}")


def sgd_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
             step_size: float) -> ParamSet:
    """``p - step_size * g`` for every parameter, as a new parameter set."""
    _check_shapes(params, grads, "sgd_step")
    if step_size == 0:
        return {k: params[k] for k in sorted(params)}
    return {k: params[k] - step_size * grads[k] for k in sorted(params)}


@dataclass(frozen=True)
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: Mapping[str, torch.Tensor], **kw) -> "AdamState":
        return cls(zeros_like(params), zeros_like(params), 0, **kw)


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
              state: AdamState, lr: float) -> tuple[ParamSet, AdamState]:
    _check_shapes(params, grads, "adam_step")
    _check_shapes(params, state.m, "adam_step state")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k in sorted(params):
        g = grads[k].detach()
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        update = lr * (m / c1) / (torch.sqrt(v / c2) + state.eps)
        new_p[k] = (params[k].detach() - update).detach()
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


def add_grads(acc: Mapping[str, torch.Tensor], g: Mapping[str, torch.Tensor]) -> GradMap:
    return {k: acc[k] + g[k] for k in acc}


# ------------------------------------------------------------------ dropout

_DETERMINISTIC = False


@contextlib.contextmanager
def deterministic_mode(on: bool = True):
    """Globally turn dropout into the identity inside the block."""
    global _DETERMINISTIC
    old, _DETERMINISTIC = _DETERMINISTIC, on
    try:
        yield
    finally:
        _DETERMINISTIC = old


def dropout(x: torch.Tensor, rate: float, generator: torch.Generator | None,
            deterministic: bool = False) -> torch.Tensor:
    if deterministic or _DETERMINISTIC or rate == 0.0:
        return x
    if generator is None:
        raise ValueError("dropout needs a seeded generator when active")
    keep = torch.rand(x.shape, generator=generator, dtype=DTYPE) >= rate
    return x * keep / (1.0 - rate)


# -------------------------------------------------------------- checkpoints

_DTYPES = {"float64": ("<f8", torch.float64), "float32": ("<f4", torch.float32)}


def save_checkpoint(directory: str | Path, params: Mapping[str, torch.Tensor],
                    config: Mapping | None = None, dtype: str = "float64") -> None:
    """Write ``manifest.txt``, ``tensors.bin`` and ``config.json`` into ``directory``."""
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {dtype}")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np_dtype = _DTYPES[dtype][0]
    lines, blobs = [], []
    for name in sorted(params):
        arr = params[name].detach().cpu().numpy().astype(np_dtype)
        if " " in name:
            raise CheckpointError(f"parameter name may not contain spaces: {name!r}")
        lines.append(" ".join([name, dtype] + [str(s) for s in arr.shape]))
        blobs.append(np.ascontiguousarray(arr).tobytes())
    (d / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    (d / "tensors.bin").write_bytes(b"".join(blobs))
    (d / "config.json").write_text(json.dumps(dict(config or {}), indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8", newline="\n")


def load_checkpoint(directory: str | Path) -> tuple[ParamSet, dict]:
    d = Path(directory)
    try:
        manifest = (d / "manifest.txt").read_text(encoding="utf-8").splitlines()
        blob = (d / "tensors.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint in {d}: {exc.filename}") from None
    params, offset, prev = {}, 0, None
    for n, line in enumerate(manifest, start=1):
        parts = line.split()
        if len(parts) < 2 or parts[1] not in _DTYPES:
            raise CheckpointError(f"bad manifest line {n}: {line!r}")
        name, dtype, shape = parts[0], parts[1], tuple(int(s) for s in parts[2:])
        if prev is not None and name <= prev:
            raise CheckpointError(f"manifest not in lexicographic order at line {n}")
        prev = name
        np_dtype = np.dtype(_DTYPES[dtype][0])
        count = math.prod(shape)
        nbytes = count * np_dtype.itemsize
        if offset + nbytes > len(blob):
            raise CheckpointError(f"tensor blob too short for {name}")
        arr = np.frombuffer(blob, dtype=np_dtype, count=count, offset=offset).reshape(shape)
        params[name] = torch.from_numpy(arr.astype("<f8")).to(DTYPE)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"tensor blob has {len(blob) - offset} trailing bytes")
    cfg_path = d / "config.json"
    config = json.loads(cfg_path.read_text(encoding="utf-8")) if cfg_path.exists() else {}
    return params, config
