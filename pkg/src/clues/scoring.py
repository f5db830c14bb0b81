"""Per-sample data-quality scores.

The main scorer traces training: for each saved checkpoint it takes the
layer-restricted update direction of a training sample and of every
validation sample and accumulates ``lr_t * <dir(val), dir(train)>``.
Higher means the sample pushed the model the same way the validation set
wants it to go. Baselines (negative loss, DataInf, random) share the same
output type so selection does not care which scorer produced a table.
"""
from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, StateError
from .model import (LoraAdapter, ModelParams, Sample, batch_grads, batch_losses,
                    trainable_layout)
from .optim import ADAM, ADAMW, SGD, Checkpoint, OptimizerKind, Trajectory, hypothetical_direction

SCORERS = ("clues", "loss", "datainf", "random")

# Upper bound on elements materialised per pairwise-dot chunk.
_CHUNK_ELEMS = 1 << 21


@dataclass(frozen=True)
class ScoringConfig:
    """``variant`` None follows the trajectory's optimizer; ``layer`` None is the first trainable layer."""

    variant: str | None = None
    layer: str | None = None
    checkpoints: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.variant is not None and self.variant not in (SGD, ADAM, ADAMW):
            raise ConfigError(f"unknown scoring variant {self.variant!r}")
        if self.checkpoints is not None and len(self.checkpoints) == 0:
            raise ConfigError("checkpoint subset must be nonempty")


@dataclass(frozen=True)
class QualityScore:
    sample_id: int
    score: float


@dataclass(frozen=True)
class DataInfConfig:
    """Damping per layer. A scalar applies to all layers; None uses 0.1 x mean squared grad norm."""

    damping: float | Mapping[str, float] | None = None

    def __post_init__(self):
        vals = self.damping.values() if isinstance(self.damping, Mapping) else [self.damping]
        for v in vals:
            if v is not None and not v > 0:
                raise ConfigError("DataInf damping must be positive")

    def for_layer(self, name: str, grads: np.ndarray) -> float:
        if isinstance(self.damping, Mapping):
            if name not in self.damping:
                raise ConfigError(f"no damping given for layer {name!r}")
            return float(self.damping[name])
        if self.damping is None:
            lam = 0.1 * float(np.mean(np.einsum("ij,ij->i", grads, grads)))
            return lam if lam > 0 else 1e-12
        return float(self.damping)


def _trainable_layers(traj: Trajectory) -> list[str]:
    tr = traj.final().trainable
    return tr.layer_names if isinstance(tr, LoraAdapter) else traj.base.layer_names


def resolve_layer(traj: Trajectory, cfg: ScoringConfig) -> str:
    layers = _trainable_layers(traj)
    if cfg.layer is None:
        return layers[0]
    if cfg.layer not in layers:
        raise ConfigError(f"layer {cfg.layer!r} is not trainable in this trajectory ({layers})")
    return cfg.layer


def _scoring_kind(traj: Trajectory, cfg: ScoringConfig) -> OptimizerKind:
    variant = cfg.variant or traj.kind.variant
    if variant == traj.kind.variant:
        return traj.kind
    decay = traj.kind.weight_decay if variant == ADAMW else None
    return replace(traj.kind, variant=variant, weight_decay=decay if decay is not None else 0.0)


def _checkpoints(traj: Trajectory, cfg: ScoringConfig) -> list[Checkpoint]:
    if not traj.checkpoints:
        raise StateError("trajectory has no checkpoints")
    if cfg.checkpoints is None:
        return list(traj.checkpoints)
    return [traj.checkpoints[i] for i in cfg.checkpoints]


def layer_grads(base: ModelParams, ck: Checkpoint, samples: Sequence[Sample],
                layer: str) -> np.ndarray:
    if isinstance(ck.trainable, LoraAdapter):
        return batch_grads(base, ck.trainable, samples, layers=[layer])[1]
    return batch_grads(ck.trainable, None, samples, layers=[layer])[1]


def directions(traj: Trajectory, ck: Checkpoint, samples: Sequence[Sample],
               cfg: ScoringConfig) -> np.ndarray:
    """Row-stacked layer-restricted update directions at one checkpoint."""
    layer = resolve_layer(traj, cfg)
    g = layer_grads(traj.base, ck, samples, layer)
    kind = _scoring_kind(traj, cfg)
    if kind.variant == SGD:
        return g
    if ck.state is None:
        raise StateError(f"checkpoint t={ck.t} has no optimizer state")
    adapter = ck.trainable if isinstance(ck.trainable, LoraAdapter) else None
    block = trainable_layout(traj.base, adapter)[layer]
    return hypothetical_direction(kind, ck, g, block)


def pair_dots(train_dirs: np.ndarray, val_dirs: np.ndarray) -> np.ndarray:
    """``(n_train, n_val)`` inner products, each row computed independently of the others."""
    n, m = train_dirs.shape[0], val_dirs.shape[0]
    out = np.empty((n, m))
    step = max(1, _CHUNK_ELEMS // max(1, m * train_dirs.shape[1]))
    for s in range(0, n, step):
        out[s:s + step] = np.einsum("ik,jk->ij", train_dirs[s:s + step], val_dirs)
    return out


def _by_id(samples: Iterable[Sample]) -> list[Sample]:
    ordered = sorted(samples, key=lambda s: s.id)
    ids = [s.id for s in ordered]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate sample ids")
    return ordered


def score_dataset(samples: Sequence[Sample], val_set: Sequence[Sample], trajectory: Trajectory,
                  config: ScoringConfig | None = None) -> list[QualityScore]:
    """Training-dynamics score for every sample, ordered by sample id.

    Validation directions are computed once per checkpoint and reused; the
    sum runs checkpoint-major, validation-id-minor.
    """
    cfg = config or ScoringConfig()
    if not val_set:
        raise ConfigError("validation set is empty")
    train = _by_id(samples)
    val = _by_id(val_set)
    cks = _checkpoints(trajectory, cfg)
    acc = np.zeros(len(train))
    for ck in cks:
        dv = directions(trajectory, ck, val, cfg)
        dt = directions(trajectory, ck, train, cfg)
        dots = pair_dots(dt, dv)
        for j in range(len(val)):
            acc += ck.lr * dots[:, j]
    return [QualityScore(s.id, float(a)) for s, a in zip(train, acc)]


def clues_score(z: Sample, val_set: Sequence[Sample], trajectory: Trajectory,
                config: ScoringConfig | None = None) -> QualityScore:
    return score_dataset([z], val_set, trajectory, config)[0]


# --- baselines ------------------------------------------------------------

def _adapter_of(ck: Checkpoint) -> tuple[ModelParams | None, LoraAdapter | None]:
    if isinstance(ck.trainable, LoraAdapter):
        return None, ck.trainable
    return ck.trainable, None


def loss_scores(samples: Sequence[Sample], checkpoint: Checkpoint,
                base: ModelParams) -> list[QualityScore]:
    """Negative per-sample loss at the final checkpoint (the perplexity analogue)."""
    train = _by_id(samples)
    own, adapter = _adapter_of(checkpoint)
    losses = batch_losses(own or base, adapter, train)
    return [QualityScore(s.id, float(-l)) for s, l in zip(train, losses)]


def loss_score(z: Sample, checkpoint: Checkpoint, base: ModelParams) -> QualityScore:
    return loss_scores([z], checkpoint, base)[0]


def datainf_scores(samples: Sequence[Sample], val_set: Sequence[Sample], checkpoint: Checkpoint,
                   base: ModelParams, config: DataInfConfig | None = None,
                   population: Sequence[Sample] | None = None) -> list[QualityScore]:
    """DataInf influence with the sign flipped so larger means more helpful.

    Per layer, with ``v`` the summed validation gradient, ``g_i`` the gradients
    of the Hessian population and ``g_k`` the scored sample::

        score_k = sum_l (1/lam_l) * (v.g_k - (1/n) sum_i (v.g_i)(g_i.g_k) / (lam_l + g_i.g_i))

    ``population`` defaults to ``samples`` (the client's own training set).
    """
    cfg = config or DataInfConfig()
    train = _by_id(samples)
    pop = _by_id(population) if population is not None else train
    if not pop:
        raise ConfigError("DataInf needs at least one population sample")
    if not val_set:
        raise ConfigError("validation set is empty")
    own, adapter = _adapter_of(checkpoint)
    params = own or base
    layers = adapter.layer_names if adapter is not None else params.layer_names
    total = np.zeros(len(train))
    for layer in layers:
        gv = batch_grads(params, adapter, val_set, layers=[layer])[1].sum(axis=0)
        gp = batch_grads(params, adapter, pop, layers=[layer])[1]
        gk = gp if pop is train else batch_grads(params, adapter, train, layers=[layer])[1]
        lam = cfg.for_layer(layer, gp)
        l_i = gp @ gv
        coef = l_i / (lam + np.einsum("ij,ij->i", gp, gp))
        w = (coef @ gp) / len(pop)
        total += (gk @ gv - gk @ w) / lam
    return [QualityScore(s.id, float(v)) for s, v in zip(train, total)]


def datainf_score(z: Sample, val_set: Sequence[Sample], checkpoint: Checkpoint, base: ModelParams,
                  config: DataInfConfig | None = None,
                  population: Sequence[Sample] | None = None) -> QualityScore:
    return datainf_scores([z], val_set, checkpoint, base, config, population or [z])[0]


def random_score(z: Sample | int, seed: int) -> QualityScore:
    """Uniform [0, 1) value from a keyed hash of ``(seed, sample_id)``."""
    sid = z if isinstance(z, int) else z.id
    digest = hashlib.blake2b(struct.pack("<qq", seed, sid), digest_size=8).digest()
    value = (int.from_bytes(digest, "little") >> 11) / float(1 << 53)
    return QualityScore(sid, value)


def random_scores(samples: Sequence[Sample], seed: int) -> list[QualityScore]:
    return [random_score(s, seed) for s in _by_id(samples)]


# --- export ---------------------------------------------------------------

def write_scores_csv(path, rows: Iterable[tuple[int | str, Sequence[QualityScore], str]]) -> None:
    """``rows`` yields ``(client_id, scores, scorer)``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "score", "scorer", "client_id"])
        for client_id, scores, scorer in rows:
            for s in scores:
                w.writerow([s.sample_id, f"{s.score:.17g}", scorer, client_id])


def read_scores_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {"sample_id": int(r["sample_id"]), "score": float(r["score"]),
             "scorer": r["scorer"], "client_id": r["client_id"]}
            for r in csv.DictReader(f)
        ]
