"""Small hand-differentiated numeric kernel.

Everything here works on float64 numpy arrays. Models are shallow enough
(one affine layer per output, plus the fusion gate) that backward passes are
written out by hand; :class:`Param` only carries values, accumulated
gradients and Adam state.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError

DTYPE = np.float64
CHECKPOINT_FORMAT = "gloie-checkpoint/1"


class Param:
    """A named float64 tensor with a gradient accumulator and Adam moments."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def accumulate(self, g):
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != self.value.shape:
            raise ValueError(f"{self.name}: gradient shape {g.shape} != {self.value.shape}")
        self.grad += g

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def glorot_uniform(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    fan_out, fan_in = shape
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def affine_forward(x, W: Param, b: Param) -> np.ndarray:
    """``W @ x + b`` for a vector ``x`` of shape (n,) or a batch of shape (B, n)."""
    x = np.asarray(x, dtype=DTYPE)
    m, n = W.shape
    if x.shape[-1] != n or b.shape != (m,):
        raise ValueError(f"affine shapes: x{x.shape}, W{W.shape}, b{b.shape}")
    return x @ W.value.T + b.value


def affine_backward(upstream, x, W: Param, b: Param | None = None):
    """Backward of :func:`affine_forward`.

    Gradients are added to ``W.grad`` (and ``b.grad``); the returned tuple holds
    the contributions of this call, ``(grad_x, grad_W, grad_b)``.
    """
    upstream = np.asarray(upstream, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    m, n = W.shape
    if upstream.shape[-1] != m or x.shape[-1] != n or upstream.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"affine backward shapes: upstream{upstream.shape}, x{x.shape}, W{W.shape}")
    if x.ndim == 1:
        grad_W = np.outer(upstream, x)
        grad_b = upstream.copy()
    else:
        grad_W = upstream.T @ x
        grad_b = upstream.sum(axis=0)
    grad_x = upstream @ W.value
    W.accumulate(grad_W)
    if b is not None:
        b.accumulate(grad_b)
    return grad_x, grad_W, grad_b


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            val = getattr(self, name)
            if not 0.0 < val < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {val}")


def adam_step(params: Iterable[Param], config: OptimizerConfig) -> None:
    """Bias-corrected Adam update; zeroes gradients afterwards."""
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError(f"non-finite gradient in tensor {p.name!r}")
    for p in params:
        p.step += 1
        g = p.grad
        p.m = config.beta1 * p.m + (1.0 - config.beta1) * g
        p.v = config.beta2 * p.v + (1.0 - config.beta2) * g * g
        m_hat = p.m / (1.0 - config.beta1 ** p.step)
        v_hat = p.v / (1.0 - config.beta2 ** p.step)
        p.value = p.value - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
        p.zero_grad()


def unique_params(params: Iterable[Param]) -> list[Param]:
    # tied tensors show up more than once; keep first occurrence
    seen, out = set(), []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def gradient_check(
    loss_fn: Callable[[], float],
    params: Sequence[Param],
    h: float = 1e-5,
    max_coords: int = 200,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must compute the loss from the current parameter values and
    accumulate its analytic gradient into ``Param.grad``. Any sampling noise
    has to be frozen inside it. At most ``max_coords`` coordinates are probed.
    The relative error uses ``max(|analytic|, |numeric|, floor)`` as denominator;
    central differences cannot resolve gradients much below ``ulp(loss) / h``.
    """
    params = unique_params(params)
    for p in params:
        p.zero_grad()
    base = loss_fn()
    if not math.isfinite(base):
        raise DivergenceError("loss is not finite at the base point")
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    coords = [(k, idx) for k, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if len(coords) > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for k, idx in coords:
        p = params[k]
        orig = p.value[idx]
        p.value[idx] = orig + h
        f_plus = loss_fn()
        p.value[idx] = orig - h
        f_minus = loss_fn()
        p.value[idx] = orig
        for q in params:
            q.zero_grad()
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise DivergenceError(f"non-finite loss while probing {p.name}{idx}")
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[k][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst


def save_checkpoint(stem: str | Path, params: Mapping[str, Param], meta: dict | None = None) -> None:
    """Write ``<stem>.json`` (manifest) and ``<stem>.bin`` (little-endian float64 blob)."""
    stem = Path(stem)
    entries, chunks, offset = [], [], 0
    for name, p in params.items():
        data = np.ascontiguousarray(p.value, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "count": int(data.size)})
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = {"format": CHECKPOINT_FORMAT, "dtype": "float64-le", "tensors": entries, "meta": meta or {}}
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_checkpoint(stem: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{stem}: unknown checkpoint format {manifest.get('format')!r}")
    blob = stem.with_suffix(".bin").read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f8", count=e["count"], offset=e["offset"])
        tensors[e["name"]] = arr.astype(DTYPE).reshape(e["shape"])
    return tensors, manifest["meta"]
