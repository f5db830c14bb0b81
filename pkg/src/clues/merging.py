"""Merging of low-rank adapters: weighted averaging, task arithmetic and TIES.

Every operator processes adapters in a canonical order (descending weight,
then raw bytes) so the result does not depend on how inputs were listed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, IncompatibleAdaptersError
from .model import LoraAdapter

LINEAR = "linear"
TASK_ARITHMETIC = "task_arithmetic"
TIES = "ties"
METHODS = (LINEAR, TASK_ARITHMETIC, TIES)
DEFAULT_DENSITY = 0.2


@dataclass(frozen=True)
class MergeWeights:
    values: tuple[float, ...]
    policy: str = "raw"

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.policy not in ("raw", "sum-to-one"):
            raise ConfigError(f"unknown weight policy {self.policy!r}")
        if not self.values or any(not math.isfinite(v) or v < 0 for v in self.values):
            raise ConfigError("merge weights must be finite and nonnegative")
        if sum(self.values) <= 0:
            raise ConfigError("merge weights must have a positive sum")

    def resolved(self) -> tuple[float, ...]:
        if self.policy == "raw":
            return self.values
        total = math.fsum(self.values)
        return tuple(v / total for v in self.values)


@dataclass(frozen=True)
class MergeMethod:
    """``weights`` None means: data sizes for linear, uniform 1/K otherwise."""

    method: str = LINEAR
    density: float = DEFAULT_DENSITY
    weights: MergeWeights | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown merge method {self.method!r}")
        if not 0.0 < self.density <= 1.0:
            raise ConfigError(f"TIES density {self.density} outside (0, 1]")

    def provenance(self, weights: Sequence[float]) -> dict:
        out = {"method": self.method, "weights": [float(w) for w in weights]}
        if self.method == TIES:
            out["density"] = self.density
        return out


def _weights(weights, k: int) -> list[float]:
    if weights is None:
        return [1.0 / k] * k
    w = weights.resolved() if isinstance(weights, MergeWeights) else MergeWeights(tuple(weights)).values
    if len(w) != k:
        raise ConfigError(f"{len(w)} weights for {k} adapters")
    return list(w)


def _check(adapters: Sequence[LoraAdapter]) -> None:
    if not adapters:
        raise ConfigError("nothing to merge")
    first = adapters[0]
    for i, a in enumerate(adapters[1:], start=1):
        if not first.same_structure(a):
            raise IncompatibleAdaptersError(
                f"adapter {i} differs from adapter 0 (layers {a.layer_names} vs {first.layer_names}, "
                f"rank {a.rank} vs {first.rank}, alpha {a.alpha} vs {first.alpha})")


def _canonical(adapters: Sequence[LoraAdapter], w: Sequence[float]) -> list[int]:
    return sorted(range(len(adapters)), key=lambda k: (-w[k], adapters[k].flat().tobytes()))


def _rebuild(template: LoraAdapter, tensors: list[tuple[np.ndarray, np.ndarray]]) -> LoraAdapter:
    layers = tuple((n, a, b) for (n, _, _), (a, b) in zip(template.layers, tensors))
    return LoraAdapter(layers, template.rank, template.alpha)


def _per_tensor(adapters: Sequence[LoraAdapter], fn) -> LoraAdapter:
    out = []
    for li in range(len(adapters[0].layers)):
        a = fn([ad.layers[li][1] for ad in adapters])
        b = fn([ad.layers[li][2] for ad in adapters])
        out.append((a, b))
    return _rebuild(adapters[0], out)


def linear_merge(adapters: Sequence[LoraAdapter], weights=None) -> LoraAdapter:
    """Convex combination with weights normalized to sum to one."""
    _check(adapters)
    w = _weights(weights, len(adapters))
    total = math.fsum(w)
    wn = [v / total for v in w]
    order = _canonical(adapters, wn)
    ref, rest = order[0], [k for k in order[1:] if wn[k] > 0]

    def combine(ts):
        # Anchoring on the heaviest input keeps identical inputs and one-hot weights exact.
        out = ts[ref].copy()
        for k in rest:
            out = out + wn[k] * (ts[k] - ts[ref])
        stack = np.stack(ts)
        return np.clip(out, stack.min(axis=0), stack.max(axis=0))

    return _per_tensor(adapters, combine)


def task_arithmetic_merge(adapters: Sequence[LoraAdapter], weights=None) -> LoraAdapter:
    """``A = sum sqrt(w_k) A_k`` and ``B = sum sqrt(w_k) B_k`` (raw weights, no normalization)."""
    _check(adapters)
    w = _weights(weights, len(adapters))
    order = [k for k in _canonical(adapters, w) if w[k] > 0]
    roots = {k: math.sqrt(w[k]) for k in order}

    def combine(ts):
        out = roots[order[0]] * ts[order[0]]
        for k in order[1:]:
            out = out + roots[k] * ts[k]
        return out

    return _per_tensor(adapters, combine)


def trim(t: np.ndarray, density: float) -> np.ndarray:
    """Keep the ``ceil(density * numel)`` largest-magnitude entries (earlier index wins ties)."""
    flat = t.ravel()
    keep = math.ceil(density * flat.size - 1e-12)
    out = np.zeros_like(flat)
    idx = np.argsort(-np.abs(flat), kind="stable")[:keep]
    out[idx] = flat[idx]
    return out.reshape(t.shape)


def ties_merge(adapters: Sequence[LoraAdapter], density: float = DEFAULT_DENSITY,
               weights=None) -> LoraAdapter:
    """Trim, elect a sign by weighted sum, then average the entries agreeing with it.

    Coordinates whose weighted sum is exactly zero merge to zero.
    """
    if not 0.0 < density <= 1.0:
        raise ConfigError(f"TIES density {density} outside (0, 1]")
    _check(adapters)
    w = _weights(weights, len(adapters))
    order = _canonical(adapters, w)

    def combine(ts):
        trimmed = [trim(ts[k], density) for k in order]
        elect = np.zeros_like(trimmed[0])
        for k, t in zip(order, trimmed):
            elect = elect + w[k] * t
        sign = np.sign(elect)
        total = np.zeros_like(elect)
        count = np.zeros_like(elect)
        for t in trimmed:
            agree = (t != 0) & (np.sign(t) == sign) & (sign != 0)
            total = total + np.where(agree, t, 0.0)
            count = count + agree
        return np.where(count > 0, total / np.maximum(count, 1), 0.0)

    return _per_tensor(adapters, combine)


def merge(adapters: Sequence[LoraAdapter], method: MergeMethod,
          sizes: Sequence[int] | None = None) -> tuple[LoraAdapter, dict]:
    """Dispatch on ``method``; returns the merged adapter and its provenance record."""
    k = len(adapters)
    if method.weights is not None:
        w = list(method.weights.resolved())
    elif method.method == LINEAR and sizes is not None:
        w = [float(s) for s in sizes]
    else:
        w = [1.0 / k] * k
    if method.method == LINEAR:
        out = linear_merge(adapters, w)
    elif method.method == TASK_ARITHMETIC:
        out = task_arithmetic_merge(adapters, w)
    else:
        out = ties_merge(adapters, method.density, w)
    return out, method.provenance(w)
