"""Small differentiable heads with low-rank adapters and exact per-sample gradients.

Two architectures are supported: a single linear layer (``fc``) and a two-layer
tanh MLP (``fc1`` -> tanh -> ``fc2``). Layers carry no bias. An attached
:class:`LoraAdapter` makes the adapter factors the only trainable parameters;
without one, the base weights are trainable.

The flat trainable layout is: for every trainable layer in segment order, the
``A`` block then the ``B`` block (adapter), or the weight matrix (no adapter),
each raveled row-major.
"""
from __future__ import annotations

import enum
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, LabelAccessError, NumericError

LINEAR = "linear"
MLP = "mlp"
REGRESSION = "regression"
CLASSIFICATION = "classification"

DEFAULT_RANK = 16


# --- quality labels -------------------------------------------------------

class PollutionKind(str, enum.Enum):
    LABEL_SUBSTITUTION = "label_substitution"
    TRUNCATION = "truncation"
    NOISE_INJECTION = "noise_injection"


@dataclass(frozen=True)
class QualityLabel:
    clean: bool
    kind: PollutionKind | None = None

    @classmethod
    def polluted(cls, kind: PollutionKind) -> QualityLabel:
        return cls(False, PollutionKind(kind))

    def __str__(self) -> str:
        return "clean" if self.clean else "polluted"


CLEAN = QualityLabel(True)

_seal_lock = threading.Lock()
_seal_depth = 0


@contextmanager
def labels_sealed() -> Iterator[None]:
    """Make any read of ``Sample.quality_label`` raise while the block runs.

    Scoring, selection, merging and federation run sealed so a test can prove
    they never consult ground truth.
    """
    global _seal_depth
    with _seal_lock:
        _seal_depth += 1
    try:
        yield
    finally:
        with _seal_lock:
            _seal_depth -= 1


def labels_are_sealed() -> bool:
    return _seal_depth > 0


@dataclass(frozen=True, eq=False)
class Sample:
    id: int
    features: np.ndarray
    target: np.ndarray | int
    _label: QualityLabel = field(default=CLEAN, repr=False)

    @property
    def quality_label(self) -> QualityLabel:
        if _seal_depth > 0:
            raise LabelAccessError(f"quality label of sample {self.id} read while labels are sealed")
        return self._label

    def with_label(self, label: QualityLabel, **changes) -> Sample:
        return Sample(
            id=changes.get("id", self.id),
            features=changes.get("features", self.features),
            target=changes.get("target", self.target),
            _label=label,
        )


# --- parameters -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelParams:
    """Frozen backbone: ordered ``(layer_name, weight)`` segments.

    Weights have shape ``(d_out, d_in)``. The MLP hidden activation is tanh.
    """

    arch: str
    segments: tuple[tuple[str, np.ndarray], ...]
    task: str = REGRESSION

    def __post_init__(self):
        if self.arch not in (LINEAR, MLP):
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.task not in (REGRESSION, CLASSIFICATION):
            raise ConfigError(f"unknown task {self.task!r}")
        names = [n for n, _ in self.segments]
        expected = ["fc"] if self.arch == LINEAR else ["fc1", "fc2"]
        if names != expected:
            raise ConfigError(f"{self.arch} expects layers {expected}, got {names}")
        for i in range(1, len(self.segments)):
            if self.segments[i][1].shape[1] != self.segments[i - 1][1].shape[0]:
                raise DimensionError("consecutive layer shapes do not chain")

    @property
    def layer_names(self) -> list[str]:
        return [n for n, _ in self.segments]

    def weight(self, name: str) -> np.ndarray:
        for n, w in self.segments:
            if n == name:
                return w
        raise KeyError(name)

    @property
    def d_in(self) -> int:
        return self.segments[0][1].shape[1]

    @property
    def d_out(self) -> int:
        return self.segments[-1][1].shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for _, w in self.segments])

    def with_flat(self, vec: np.ndarray) -> ModelParams:
        segs, off = [], 0
        for n, w in self.segments:
            segs.append((n, vec[off:off + w.size].reshape(w.shape).copy()))
            off += w.size
        return ModelParams(self.arch, tuple(segs), self.task)


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    """Low-rank factors per adapted layer; delta for a layer is (alpha/rank)·B·A."""

    layers: tuple[tuple[str, np.ndarray, np.ndarray], ...]
    rank: int
    alpha: float

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def layer_names(self) -> list[str]:
        return [n for n, _, _ in self.layers]

    def factors(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        for n, a, b in self.layers:
            if n == name:
                return a, b
        raise KeyError(name)

    def delta(self, name: str) -> np.ndarray:
        a, b = self.factors(name)
        return self.scale * (b @ a)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([a.ravel(), b.ravel()]) for _, a, b in self.layers])

    def with_flat(self, vec: np.ndarray) -> LoraAdapter:
        layers, off = [], 0
        for n, a, b in self.layers:
            na = vec[off:off + a.size].reshape(a.shape).copy()
            off += a.size
            nb = vec[off:off + b.size].reshape(b.shape).copy()
            off += b.size
            layers.append((n, na, nb))
        return LoraAdapter(tuple(layers), self.rank, self.alpha)

    def same_structure(self, other: LoraAdapter) -> bool:
        if self.rank != other.rank or self.alpha != other.alpha:
            return False
        if self.layer_names != other.layer_names:
            return False
        return all(
            a1.shape == a2.shape and b1.shape == b2.shape
            for (_, a1, b1), (_, a2, b2) in zip(self.layers, other.layers)
        )

    def equals(self, other: LoraAdapter) -> bool:
        """Bit-for-bit equality of structure and factors."""
        return self.same_structure(other) and all(
            np.array_equal(a1, a2) and np.array_equal(b1, b2)
            for (_, a1, b1), (_, a2, b2) in zip(self.layers, other.layers)
        )


def make_params(arch: str, dims: Sequence[int], rng: np.random.Generator,
                task: str = REGRESSION, scale: float = 1.0) -> ModelParams:
    """Random backbone. ``dims`` is ``(d_in, d_out)`` or ``(d_in, hidden, d_out)``."""
    if arch == LINEAR:
        d_in, d_out = dims
        w = rng.normal(0.0, scale / np.sqrt(d_in), size=(d_out, d_in))
        return ModelParams(arch, (("fc", w),), task)
    d_in, hidden, d_out = dims
    w1 = rng.normal(0.0, scale / np.sqrt(d_in), size=(hidden, d_in))
    w2 = rng.normal(0.0, scale / np.sqrt(hidden), size=(d_out, hidden))
    return ModelParams(arch, (("fc1", w1), ("fc2", w2)), task)


def init_adapter(params: ModelParams, layers: Sequence[str] | None = None,
                 rank: int = DEFAULT_RANK, alpha: float | None = None,
                 seed: int = 0) -> LoraAdapter:
    """Fresh adapter: A ~ N(0, 1/rank) elementwise, B = 0. ``alpha`` defaults to ``rank``."""
    names = params.layer_names if layers is None else list(layers)
    if not names:
        raise ConfigError("adapter needs at least one layer")
    alpha = float(rank) if alpha is None else float(alpha)
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    rng = np.random.default_rng(seed)
    out = []
    for name in params.layer_names:
        if name not in names:
            continue
        d_out, d_in = params.weight(name).shape
        if not 1 <= rank <= min(d_in, d_out):
            raise ConfigError(f"rank {rank} out of range for layer {name} ({d_out}x{d_in})")
        a = rng.normal(0.0, np.sqrt(1.0 / rank), size=(rank, d_in))
        b = np.zeros((d_out, rank))
        out.append((name, a, b))
    unknown = set(names) - set(params.layer_names)
    if unknown:
        raise ConfigError(f"unknown layers {sorted(unknown)}")
    return LoraAdapter(tuple(out), int(rank), alpha)


# --- evaluation -----------------------------------------------------------

def _effective(params: ModelParams, adapter: LoraAdapter | None, name: str) -> np.ndarray:
    w = params.weight(name)
    if adapter is not None and name in adapter.layer_names:
        return w + adapter.delta(name)
    return w


def _stack(samples: Sequence[Sample], params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([np.asarray(s.features, dtype=np.float64) for s in samples])
    if x.shape[1] != params.d_in:
        raise DimensionError(f"feature dimension {x.shape[1]} != model input {params.d_in}")
    if params.task == CLASSIFICATION:
        y = np.array([int(s.target) for s in samples])
        if y.min() < 0 or y.max() >= params.d_out:
            raise DimensionError("class index out of range")
    else:
        y = np.stack([np.atleast_1d(np.asarray(s.target, dtype=np.float64)) for s in samples])
        if y.shape[1] != params.d_out:
            raise DimensionError(f"target dimension {y.shape[1]} != model output {params.d_out}")
    return x, y


def _forward_batch(params, adapter, x):
    """Returns (outputs, per-layer inputs, hidden activation or None)."""
    if params.arch == LINEAR:
        w = _effective(params, adapter, "fc")
        return x @ w.T, [x], None
    w1 = _effective(params, adapter, "fc1")
    w2 = _effective(params, adapter, "fc2")
    h = np.tanh(x @ w1.T)
    return h @ w2.T, [x, h], h


def forward(params: ModelParams, adapter: LoraAdapter | None, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.d_in:
        raise DimensionError(f"input of shape {x.shape} does not match d_in={params.d_in}")
    out, _, _ = _forward_batch(params, adapter, x[None, :])
    return out[0]


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _loss_and_delta(params, out, y):
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite model output")
    if params.task == CLASSIFICATION:
        logp = _log_softmax(out)
        idx = np.arange(len(y))
        losses = -logp[idx, y]
        delta = np.exp(logp)
        delta[idx, y] -= 1.0
        return losses, delta
    resid = out - y
    return 0.5 * np.einsum("ij,ij->i", resid, resid), resid


def batch_losses(params: ModelParams, adapter: LoraAdapter | None,
                 samples: Sequence[Sample]) -> np.ndarray:
    x, y = _stack(samples, params)
    out, _, _ = _forward_batch(params, adapter, x)
    return _loss_and_delta(params, out, y)[0]


def per_sample_loss(params: ModelParams, adapter: LoraAdapter | None, z: Sample) -> float:
    return float(batch_losses(params, adapter, [z])[0])


def mean_loss(params: ModelParams, adapter: LoraAdapter | None, samples: Sequence[Sample]) -> float:
    return float(np.mean(batch_losses(params, adapter, samples)))


def trainable_layout(params: ModelParams, adapter: LoraAdapter | None) -> dict[str, slice]:
    """Slice of the flat trainable vector owned by each trainable layer."""
    layout, off = {}, 0
    if adapter is None:
        for name, w in params.segments:
            layout[name] = slice(off, off + w.size)
            off += w.size
        return layout
    for name, a, b in adapter.layers:
        n = a.size + b.size
        layout[name] = slice(off, off + n)
        off += n
    return layout


def n_trainable(params: ModelParams, adapter: LoraAdapter | None) -> int:
    if adapter is None:
        return sum(w.size for _, w in params.segments)
    return sum(a.size + b.size for _, a, b in adapter.layers)


def _layer_grads(params, adapter, name, inp, delta):
    """Per-sample gradient block for one layer given its input and output delta."""
    n = inp.shape[0]
    if adapter is None:
        return (delta[:, :, None] * inp[:, None, :]).reshape(n, -1)
    if name not in adapter.layer_names:
        return None
    a, b = adapter.factors(name)
    s = adapter.scale
    u = delta @ b            # (n, r): B^T delta
    v = inp @ a.T            # (n, r): A x
    ga = s * (u[:, :, None] * inp[:, None, :])
    gb = s * (delta[:, :, None] * v[:, None, :])
    return np.concatenate([ga.reshape(n, -1), gb.reshape(n, -1)], axis=1)


def batch_grads(params: ModelParams, adapter: LoraAdapter | None, samples: Sequence[Sample],
                layers: Sequence[str] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses ``(n,)`` and gradients ``(n, P)`` in the flat layout.

    ``layers`` restricts the returned columns to those layers' blocks, in
    segment order.
    """
    x, y = _stack(samples, params)
    out, inputs, h = _forward_batch(params, adapter, x)
    losses, delta = _loss_and_delta(params, out, y)
    trainable = params.layer_names if adapter is None else adapter.layer_names
    wanted = trainable if layers is None else list(layers)
    for name in wanted:
        if name not in trainable:
            raise KeyError(f"layer {name!r} is not trainable")
    blocks: dict[str, np.ndarray] = {}
    if params.arch == LINEAR:
        blocks["fc"] = _layer_grads(params, adapter, "fc", inputs[0], delta)
    else:
        if "fc2" in wanted:
            blocks["fc2"] = _layer_grads(params, adapter, "fc2", inputs[1], delta)
        if "fc1" in wanted:
            w2 = _effective(params, adapter, "fc2")
            d1 = (delta @ w2) * (1.0 - h * h)
            blocks["fc1"] = _layer_grads(params, adapter, "fc1", inputs[0], d1)
    cols = [blocks[n] for n in trainable if n in wanted]
    g = np.concatenate(cols, axis=1) if cols else np.zeros((len(samples), 0))
    return losses, g


def per_sample_grad(params: ModelParams, adapter: LoraAdapter | None, z: Sample) -> np.ndarray:
    return batch_grads(params, adapter, [z])[1][0]


def per_sample_grad_layer(params: ModelParams, adapter: LoraAdapter | None, z: Sample,
                          layer_name: str) -> np.ndarray:
    trainable = params.layer_names if adapter is None else adapter.layer_names
    if layer_name not in trainable:
        raise KeyError(f"layer {layer_name!r} is not trainable")
    return batch_grads(params, adapter, [z], layers=[layer_name])[1][0]


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], point: np.ndarray,
                     h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of ``loss_fn`` at ``point``."""
    if h <= 0:
        raise ConfigError("h must be positive")
    point = np.asarray(point, dtype=np.float64)
    grad = np.empty_like(point)
    for i in range(point.size):
        e = np.zeros_like(point)
        e.flat[i] = h
        grad.flat[i] = (loss_fn(point + e) - loss_fn(point - e)) / (2 * h)
    return grad
