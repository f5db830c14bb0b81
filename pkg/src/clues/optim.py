"""SGD / Adam / AdamW steps that expose the update direction, plus checkpointed training.

Every variant updates ``params - lr * direction``. For the moment variants the
stored moments are the raw exponential averages; bias correction by
``1 - beta**t`` is applied when the direction is formed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError, StateError, StepIndexError
from .model import LoraAdapter, ModelParams, Sample, batch_grads

SGD = "sgd"
ADAM = "adam"
ADAMW = "adamw"
VARIANTS = (SGD, ADAM, ADAMW)

DEFAULT_EPOCHS = 3
DEFAULT_BATCH_SIZE = 16


@dataclass(frozen=True)
class OptimizerKind:
    variant: str = ADAMW
    lr: float | tuple[float, ...] = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float | None = 0.01

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown optimizer variant {self.variant!r}")
        if isinstance(self.lr, (list, tuple)):
            object.__setattr__(self, "lr", tuple(float(v) for v in self.lr))
            if not self.lr or min(self.lr) <= 0:
                raise ConfigError("learning-rate schedule must be nonempty and positive")
        elif not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.variant != SGD:
            if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
                raise ConfigError("betas must lie in [0, 1)")
            if not self.eps > 0:
                raise ConfigError("eps must be positive")
        if self.variant == ADAMW:
            if self.weight_decay is None:
                raise ConfigError("AdamW requires weight_decay")
            if self.weight_decay < 0:
                raise ConfigError("weight_decay must be nonnegative")

    def lr_at(self, t: int) -> float:
        """Learning rate for 1-indexed step ``t``; a schedule holds its last value."""
        if isinstance(self.lr, tuple):
            return self.lr[min(max(t, 1), len(self.lr)) - 1]
        return float(self.lr)

    @property
    def decay(self) -> float:
        return float(self.weight_decay or 0.0) if self.variant == ADAMW else 0.0

    def scaled(self, c: float) -> OptimizerKind:
        lr = tuple(c * v for v in self.lr) if isinstance(self.lr, tuple) else c * self.lr
        return OptimizerKind(self.variant, lr, self.beta1, self.beta2, self.eps, self.weight_decay)


@dataclass(frozen=True, eq=False)
class OptimState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, n: int) -> OptimState:
        return cls(np.zeros(n), np.zeros(n), 0)


def _direction(kind: OptimizerKind, params, m, v, grad, t):
    """Moment update + direction; works on 1-D vectors or row-stacked 2-D batches."""
    m_new = kind.beta1 * m + (1.0 - kind.beta1) * grad
    v_new = kind.beta2 * v + (1.0 - kind.beta2) * grad * grad
    m_hat = m_new / (1.0 - kind.beta1 ** t)
    v_hat = v_new / (1.0 - kind.beta2 ** t)
    direction = m_hat / (np.sqrt(v_hat) + kind.eps)
    if kind.variant == ADAMW and kind.decay:
        direction = direction + kind.decay * params
    return m_new, v_new, direction


def step(kind: OptimizerKind, params: np.ndarray, state: OptimState, grad: np.ndarray,
         t: int) -> tuple[np.ndarray, OptimState, np.ndarray]:
    """One update at 1-indexed step ``t``. Returns ``(new_params, new_state, direction)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    if grad.shape != params.shape:
        raise ConfigError(f"gradient shape {grad.shape} != params shape {params.shape}")
    lr = kind.lr_at(t)
    if kind.variant == SGD:
        direction = grad.copy()
        new_state = OptimState(state.m, state.v, state.step + 1)
    else:
        if t <= 0:
            raise StepIndexError(f"moment optimizers need t >= 1, got {t}")
        if state.step + 1 != t:
            raise StepIndexError(f"state is at step {state.step}, cannot take step {t}")
        m, v, direction = _direction(kind, params, state.m, state.v, grad, t)
        new_state = OptimState(m, v, t)
    return params - lr * direction, new_state, direction


# --- checkpoints ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Snapshot taken *before* step ``t``: parameters, that step's lr, and the entering state."""

    t: int
    trainable: LoraAdapter | ModelParams
    lr: float
    state: OptimState | None

    def flat(self) -> np.ndarray:
        return self.trainable.flat()


def hypothetical_direction(kind: OptimizerKind, checkpoint: Checkpoint, grad: np.ndarray,
                           block: slice | None = None) -> np.ndarray:
    """Direction the optimizer would take at ``checkpoint`` if ``grad`` were the gradient.

    ``grad`` may be a vector or a row-stacked batch; ``block`` selects the slice
    of the flat trainable layout that ``grad`` covers. Nothing is mutated.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if kind.variant == SGD:
        return grad.copy()
    st = checkpoint.state
    if st is None:
        raise StateError("checkpoint carries no optimizer state")
    sl = block if block is not None else slice(None)
    m, v = st.m[sl], st.v[sl]
    theta = checkpoint.flat()[sl] if kind.variant == ADAMW else None
    if m.shape[-1] != grad.shape[-1]:
        raise ConfigError("gradient does not match the checkpoint's state layout")
    return _direction(kind, theta, m, v, grad, st.step + 1)[2]


@dataclass(frozen=True, eq=False)
class Trajectory:
    checkpoints: tuple[Checkpoint, ...]
    cadence: str | int
    kind: OptimizerKind
    base: ModelParams

    def __post_init__(self):
        ts = [c.t for c in self.checkpoints]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise StateError("checkpoint steps must be strictly increasing")

    def __len__(self):
        return len(self.checkpoints)

    def final(self) -> Checkpoint:
        if not self.checkpoints:
            raise StateError("empty trajectory")
        return self.checkpoints[-1]


@dataclass
class TrainingRunConfig:
    """Local training job. Budget is ``epochs`` passes unless ``max_steps`` is set."""

    base: ModelParams
    init: LoraAdapter | None
    samples: Sequence[Sample]
    kind: OptimizerKind = field(default_factory=OptimizerKind)
    epochs: int = DEFAULT_EPOCHS
    max_steps: int | None = None
    batch_size: int = DEFAULT_BATCH_SIZE
    cadence: str | int = "epoch"
    seed: int = 0
    state: OptimState | None = None


@dataclass(frozen=True, eq=False)
class TrainResult:
    trainable: LoraAdapter | ModelParams
    state: OptimState
    trajectory: Trajectory
    steps: int


def train(cfg: TrainingRunConfig) -> TrainResult:
    """Mini-batch training with mean-of-per-sample gradients and checkpoint capture."""
    if not cfg.samples:
        raise ConfigError("empty training set")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if cfg.cadence != "epoch" and not (isinstance(cfg.cadence, int) and cfg.cadence >= 1):
        raise ConfigError(f"cadence must be 'epoch' or a positive int, got {cfg.cadence!r}")
    n = len(cfg.samples)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * per_epoch
    if total < 1:
        raise ConfigError("training budget must be at least one step")

    adapter = cfg.init
    trainable = adapter if adapter is not None else cfg.base
    theta = trainable.flat()
    state = cfg.state if cfg.state is not None else OptimState.fresh(theta.size)
    rng = np.random.default_rng(cfg.seed)
    checkpoints: list[Checkpoint] = []

    def snapshot(t_next: int) -> None:
        checkpoints.append(Checkpoint(t_next, trainable.with_flat(theta), cfg.kind.lr_at(t_next), state))

    done = 0
    t0 = state.step
    while done < total:
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            if done >= total:
                break
            batch = [cfg.samples[i] for i in order[start:start + cfg.batch_size]]
            current = trainable.with_flat(theta)
            if adapter is not None:
                _, g = batch_grads(cfg.base, current, batch)
            else:
                _, g = batch_grads(current, None, batch)
            grad = g.mean(axis=0)
            t = t0 + done + 1
            theta, state, _ = step(cfg.kind, theta, state, grad, t)
            done += 1
            if cfg.cadence != "epoch" and done % cfg.cadence == 0:
                snapshot(t0 + done + 1)
        if cfg.cadence == "epoch":
            snapshot(t0 + done + 1)
    return TrainResult(
        trainable=trainable.with_flat(theta),
        state=state,
        trajectory=Trajectory(tuple(checkpoints), cfg.cadence, cfg.kind, cfg.base),
        steps=done,
    )


def record_trajectory(cfg: TrainingRunConfig) -> Trajectory:
    return train(cfg).trajectory
