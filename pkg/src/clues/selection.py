"""Anchor-based global threshold and the selectors that consume score tables.

Selectors only ever see ``(sample_id, score)`` pairs and a cutoff, never the
samples themselves, so they cannot depend on ground-truth quality labels.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, StateError
from .model import Sample
from .optim import Trajectory
from .scoring import QualityScore, ScoringConfig, score_dataset

log = logging.getLogger(__name__)

DEFAULT_FALLBACK_RATIO = 0.1


@dataclass(frozen=True, eq=False)
class AnchorSet:
    samples: tuple[Sample, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(sorted(self.samples, key=lambda s: s.id)))
        if not self.samples:
            raise ConfigError("anchor set is empty")

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(s.id for s in self.samples)

    def check_disjoint(self, *datasets: Iterable[Sample]) -> None:
        mine = set(self.ids)
        for ds in datasets:
            clash = mine.intersection(s.id for s in ds)
            if clash:
                raise ConfigError(f"anchor samples {sorted(clash)[:5]} also appear in a training/validation set")

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class AnchorScoreTable:
    """Rows of ``(source, score)``; ``source`` is a client index or ``"global"``."""

    rows: tuple[tuple[int | str, QualityScore], ...]
    scorer: str = "clues"

    def values(self) -> np.ndarray:
        return np.array([s.score for _, s in self.rows], dtype=np.float64)

    @property
    def sources(self) -> tuple[int | str, ...]:
        seen: dict[int | str, None] = {}
        for src, _ in self.rows:
            seen.setdefault(src, None)
        return tuple(seen)


@dataclass(frozen=True)
class GlobalThreshold:
    tau: float
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.tau):
            raise ConfigError("threshold must be finite")


def anchor_scores(anchor: AnchorSet | Sequence[Sample], trajectories: Sequence[Trajectory] | Mapping,
                  val_set: Sequence[Sample], config: ScoringConfig | None = None) -> AnchorScoreTable:
    """Score every anchor sample under every given trajectory.

    Pass one trajectory per client for merge-once runs, or a mapping
    ``{"global": trajectory}`` when a single global trajectory exists.
    """
    anchor = anchor if isinstance(anchor, AnchorSet) else AnchorSet(tuple(anchor))
    items = list(trajectories.items()) if isinstance(trajectories, Mapping) else list(enumerate(trajectories))
    if not items:
        raise StateError("no trajectories to score anchors against")
    rows: list[tuple[int | str, QualityScore]] = []
    for src, traj in items:
        if not traj.checkpoints:
            raise StateError(f"trajectory for {src!r} is empty")
        rows += [(src, q) for q in score_dataset(anchor.samples, val_set, traj, config)]
    return AnchorScoreTable(tuple(rows))


def global_threshold(table: AnchorScoreTable | Sequence[float], **provenance) -> GlobalThreshold:
    """Arithmetic mean over every (source, anchor) score."""
    if isinstance(table, AnchorScoreTable):
        vals = table.values()
        prov = {"scorer": table.scorer, "sources": [str(s) for s in table.sources],
                "anchor_ids": sorted({q.sample_id for _, q in table.rows}), "n_scores": len(vals)}
    else:
        vals = np.asarray(table, dtype=np.float64)
        prov = {"n_scores": int(vals.size)}
    if vals.size == 0:
        raise ConfigError("anchor score table is empty")
    # math.fsum keeps the mean independent of summation order.
    tau = math.fsum(vals.tolist()) / vals.size
    prov.update(provenance)
    return GlobalThreshold(tau, prov)


def _pairs(scores: Sequence[QualityScore] | Mapping[int, float]) -> list[tuple[int, float]]:
    if isinstance(scores, Mapping):
        return [(int(k), float(v)) for k, v in scores.items()]
    return [(q.sample_id, q.score) for q in scores]


def filter_by_threshold(scores, tau: float) -> tuple[int, ...]:
    """Ids with ``score >= tau``, ascending. May be empty."""
    return tuple(sorted(i for i, s in _pairs(scores) if s >= tau))


def select_by_fixed_score(scores, s0: float) -> tuple[int, ...]:
    if not math.isfinite(s0):
        raise ConfigError("fixed score must be finite")
    return filter_by_threshold(scores, s0)


def select_by_ratio(scores, rho: float) -> tuple[int, ...]:
    """Top ``ceil(rho * n)`` by score; ties at the cut go to the lower id."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"ratio {rho} outside [0, 1]")
    pairs = _pairs(scores)
    k = math.ceil(rho * len(pairs) - 1e-12)
    ranked = sorted(pairs, key=lambda p: (-p[1], p[0]))
    return tuple(sorted(i for i, _ in ranked[:k]))


def select_or_fallback(scores, tau: float, fallback_ratio: float = DEFAULT_FALLBACK_RATIO,
                       who: str = "") -> tuple[tuple[int, ...], bool]:
    """Threshold selection; an empty result falls back to the top ``fallback_ratio``.

    Returns ``(ids, fell_back)``.
    """
    ids = filter_by_threshold(scores, tau)
    if ids or not _pairs(scores):
        return ids, False
    msg = f"no sample of {who or 'client'} reached tau={tau:.6g}; keeping top {fallback_ratio:.0%} instead"
    log.warning(msg)
    warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return select_by_ratio(scores, fallback_ratio), True


def write_selection_manifest(path, rows: Iterable[tuple[int | str, Sequence[QualityScore], Iterable[int]]],
                             tau: float) -> None:
    """CSV ``client_id,sample_id,score,selected,tau``; ``rows`` yields ``(client_id, scores, selected_ids)``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["client_id", "sample_id", "score", "selected", "tau"])
        for client_id, scores, selected in rows:
            keep = set(selected)
            for q in sorted(scores, key=lambda q: q.sample_id):
                w.writerow([client_id, q.sample_id, f"{q.score:.17g}", int(q.sample_id in keep), f"{tau:.17g}"])


def read_selection_manifest(path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {"client_id": r["client_id"], "sample_id": int(r["sample_id"]), "score": float(r["score"]),
             "selected": r["selected"] == "1", "tau": float(r["tau"])}
            for r in csv.DictReader(f)
        ]
