"""Synthetic mixed-quality benchmarks with ground-truth labels.

Every client's task is a *teacher*: the shared backbone plus a low-rank
perturbation of each layer, so a rank-matched adapter can represent it
exactly. Clean targets are the teacher's output plus Gaussian noise.
Polluted samples are produced by one of three operators:

* label substitution - target taken from an unrelated teacher
* truncation - features past a prefix are zeroed, target kept
* noise injection - target gets extra heavy Gaussian noise

Anchor and validation samples are clean and disjoint from all train sets.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .model import (CLASSIFICATION, CLEAN, LINEAR, MLP, REGRESSION, ModelParams, PollutionKind,
                    QualityLabel, Sample, _forward_batch, make_params)

IID = "iid"
DOMAIN_HET = "domain-het"
QUALITY_HET = "quality-het"
REGIMES = (IID, DOMAIN_HET, QUALITY_HET)

DEFAULT_ANCHOR_SIZE = 10
DEFAULT_VAL_SIZE = 100

# Stream tags for np.random.default_rng([seed, tag, ...]).
_T_BASE, _T_TEACHER, _T_AUX, _T_CLIENT, _T_POOL, _T_POLLUTE, _T_SPLIT = range(7)


@dataclass(frozen=True)
class TaskSpec:
    kind: str = REGRESSION
    arch: str = MLP
    d_in: int = 16
    hidden: int = 16
    d_out: int = 4
    noise: float = 0.1
    teacher_rank: int = 2
    teacher_shift: float = 1.0

    def __post_init__(self):
        if self.kind not in (REGRESSION, CLASSIFICATION):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.arch not in (LINEAR, MLP):
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.noise < 0:
            raise ConfigError("noise scale must be nonnegative")
        if self.kind == CLASSIFICATION and self.d_out < 2:
            raise ConfigError("classification needs d_out >= 2")

    @property
    def dims(self) -> tuple[int, ...]:
        if self.arch == LINEAR:
            return (self.d_in, self.d_out)
        return (self.d_in, self.hidden, self.d_out)


@dataclass(frozen=True)
class PollutionPlan:
    """Per-client pollution ratios and the mix of operators used."""

    ratios: tuple[float, ...]
    kinds: Mapping[str, float] = field(default_factory=lambda: {PollutionKind.LABEL_SUBSTITUTION.value: 1.0})
    seed: int = 0
    truncate_prefix: int = 4
    bad_noise: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        for r in self.ratios:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"pollution ratio {r} outside [0, 1]")
        kinds = {PollutionKind(k).value: float(w) for k, w in dict(self.kinds).items()}
        if not kinds or any(w < 0 for w in kinds.values()) or sum(kinds.values()) <= 0:
            raise ConfigError("pollution kind mix needs nonnegative weights with positive sum")
        object.__setattr__(self, "kinds", kinds)

    @classmethod
    def uniform(cls, k: int, ratio: float, **kw) -> PollutionPlan:
        return cls(tuple([ratio] * k), **kw)

    def n_polluted(self, client: int, n: int) -> int:
        return math.floor(self.ratios[client] * n + 1e-9)

    def kind_counts(self, total: int) -> dict[str, int]:
        """Split ``total`` across kinds by largest remainder (ties: declaration order)."""
        names = list(self.kinds)
        wsum = sum(self.kinds.values())
        exact = [total * self.kinds[k] / wsum for k in names]
        counts = [math.floor(e) for e in exact]
        rest = total - sum(counts)
        order = sorted(range(len(names)), key=lambda i: (-(exact[i] - counts[i]), i))
        for i in order[:rest]:
            counts[i] += 1
        return dict(zip(names, counts))


@dataclass(frozen=True, eq=False)
class Teacher:
    params: ModelParams

    def predict(self, x: np.ndarray) -> np.ndarray:
        return _forward_batch(self.params, None, np.atleast_2d(x))[0]


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    regime: str
    clients: tuple[tuple[Sample, ...], ...]
    val: tuple[Sample, ...]
    anchor: tuple[Sample, ...]
    base: ModelParams
    task: TaskSpec
    teachers: tuple[Teacher, ...]
    aux_teachers: tuple[Teacher, ...]
    plan: PollutionPlan
    seed: int

    @property
    def n_clients(self) -> int:
        return len(self.clients)


def make_teacher(base: ModelParams, spec: TaskSpec, rng: np.random.Generator) -> Teacher:
    """Backbone plus a random rank-``teacher_rank`` delta on every layer."""
    segs = []
    for name, w in base.segments:
        d_out, d_in = w.shape
        r = min(spec.teacher_rank, d_in, d_out)
        u = rng.normal(size=(d_out, r))
        v = rng.normal(size=(r, d_in))
        delta = spec.teacher_shift * (u @ v) / math.sqrt(r * d_in)
        segs.append((name, w + delta))
    return Teacher(ModelParams(base.arch, tuple(segs), base.task))


def _targets(teacher: Teacher, x: np.ndarray, spec: TaskSpec, rng: np.random.Generator):
    out = teacher.predict(x)
    noisy = out + rng.normal(0.0, spec.noise, size=out.shape) if spec.noise > 0 else out
    if spec.kind == CLASSIFICATION:
        return [int(i) for i in np.argmax(noisy, axis=1)]
    return [row.copy() for row in noisy]


def _clean_samples(teacher: Teacher, spec: TaskSpec, n: int, first_id: int,
                   rng: np.random.Generator) -> list[Sample]:
    x = rng.normal(size=(n, spec.d_in))
    ys = _targets(teacher, x, spec, rng)
    return [Sample(first_id + i, x[i].copy(), ys[i]) for i in range(n)]


def pollute(sample: Sample, kind: PollutionKind | str, spec: TaskSpec,
            aux_teacher: Teacher | None = None, seed: int = 0, *,
            own_teacher: Teacher | None = None, truncate_prefix: int = 4,
            bad_noise: float = 2.0) -> Sample:
    """Return a polluted copy of ``sample`` with its quality label set."""
    kind = PollutionKind(kind)
    rng = np.random.default_rng([seed, _T_POLLUTE, sample.id])
    label = QualityLabel.polluted(kind)
    if kind is PollutionKind.LABEL_SUBSTITUTION:
        if aux_teacher is None:
            raise ConfigError("label substitution needs an auxiliary teacher")
        if own_teacher is not None and aux_teacher is own_teacher:
            raise ConfigError("auxiliary teacher must differ from the sample's own teacher")
        target = _targets(aux_teacher, sample.features[None, :], spec, rng)[0]
        return sample.with_label(label, target=target)
    if kind is PollutionKind.TRUNCATION:
        if not 0 <= truncate_prefix < spec.d_in:
            raise ConfigError(f"truncation prefix must be < {spec.d_in}")
        x = sample.features.copy()
        x[truncate_prefix:] = 0.0
        return sample.with_label(label, features=x)
    if not bad_noise > spec.noise:
        raise ConfigError("injected noise must exceed the clean noise scale")
    if spec.kind == CLASSIFICATION:
        target = int(rng.integers(spec.d_out))
    else:
        target = np.asarray(sample.target) + rng.normal(0.0, bad_noise, size=spec.d_out)
    return sample.with_label(label, target=target)


def make_splits(clean_pool: Sequence[Sample], anchor_size: int = DEFAULT_ANCHOR_SIZE,
                val_size: int = DEFAULT_VAL_SIZE, seed: int = 0) -> tuple[tuple[Sample, ...], tuple[Sample, ...]]:
    """Disjoint seeded draws of anchor and validation samples from a clean pool."""
    if anchor_size < 1 or val_size < 1:
        raise ConfigError("anchor and validation sizes must be positive")
    if len(clean_pool) < anchor_size + val_size:
        raise ConfigError(f"pool of {len(clean_pool)} cannot supply {anchor_size}+{val_size} samples")
    pool = sorted(clean_pool, key=lambda s: s.id)
    perm = np.random.default_rng([seed, _T_SPLIT]).permutation(len(pool))
    anchor = sorted((pool[i] for i in perm[:anchor_size]), key=lambda s: s.id)
    val = sorted((pool[i] for i in perm[anchor_size:anchor_size + val_size]), key=lambda s: s.id)
    return tuple(anchor), tuple(val)


def gen_bundle(regime: str, k: int, n_per_client: int, plan: PollutionPlan, seed: int = 0,
               spec: TaskSpec | None = None, anchor_size: int = DEFAULT_ANCHOR_SIZE,
               val_size: int = DEFAULT_VAL_SIZE) -> DatasetBundle:
    spec = spec or TaskSpec()
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if k < 1 or n_per_client < 1:
        raise ConfigError("need at least one client and one sample per client")
    if len(plan.ratios) != k:
        raise ConfigError(f"plan has {len(plan.ratios)} ratios for {k} clients")
    if regime == IID and len(set(plan.ratios)) > 1:
        raise ConfigError("IID regime requires a uniform pollution ratio")

    base = make_params(spec.arch, spec.dims, np.random.default_rng([seed, _T_BASE]), spec.kind)
    n_teachers = k if regime == DOMAIN_HET else 1
    teachers = tuple(make_teacher(base, spec, np.random.default_rng([seed, _T_TEACHER, i]))
                     for i in range(n_teachers))
    aux = tuple(make_teacher(base, spec, np.random.default_rng([seed, _T_AUX, c])) for c in range(k))

    clients = []
    for c in range(k):
        teacher = teachers[c % n_teachers]
        rng = np.random.default_rng([seed, _T_CLIENT, c])
        clean = _clean_samples(teacher, spec, n_per_client, c * n_per_client, rng)
        n_bad = plan.n_polluted(c, n_per_client)
        prng = np.random.default_rng([plan.seed, _T_POLLUTE, c])
        victims = prng.permutation(n_per_client)[:n_bad]
        kinds: list[str] = []
        for name, cnt in plan.kind_counts(n_bad).items():
            kinds += [name] * cnt
        kinds = [kinds[i] for i in prng.permutation(len(kinds))]
        out = list(clean)
        for idx, kind in zip(victims, kinds):
            out[idx] = pollute(clean[idx], kind, spec, aux[c], seed=plan.seed, own_teacher=teacher,
                               truncate_prefix=plan.truncate_prefix, bad_noise=plan.bad_noise)
        clients.append(tuple(out))

    pool_n = anchor_size + val_size
    first = k * n_per_client
    pool: list[Sample] = []
    per_teacher = math.ceil(pool_n / n_teachers)
    for i, teacher in enumerate(teachers):
        rng = np.random.default_rng([seed, _T_POOL, i])
        pool += _clean_samples(teacher, spec, per_teacher, first + i * per_teacher, rng)
    anchor, val = make_splits(pool, anchor_size, val_size, seed)
    return DatasetBundle(regime, tuple(clients), val, anchor, base, spec, teachers, aux, plan, seed)


# --- persistence ----------------------------------------------------------

def _label_fields(s: Sample) -> tuple[str, str]:
    lab = s.quality_label
    return ("clean", "") if lab.clean else ("polluted", lab.kind.value)


def _write_samples(path: Path, samples: Sequence[Sample], spec: TaskSpec) -> None:
    t_cols = ["target"] if spec.kind == CLASSIFICATION or spec.d_out == 1 else \
        [f"target_{j}" for j in range(spec.d_out)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", *[f"f{j}" for j in range(spec.d_in)], *t_cols, "quality_label", "pollution_kind"])
        for s in samples:
            tgt = [s.target] if spec.kind == CLASSIFICATION else [repr(float(v)) for v in np.atleast_1d(s.target)]
            w.writerow([s.id, *[repr(float(v)) for v in s.features], *tgt, *_label_fields(s)])


def _read_samples(path: Path, spec: TaskSpec) -> tuple[Sample, ...]:
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        n_t = len(header) - 1 - spec.d_in - 2
        for row in reader:
            sid = int(row[0])
            x = np.array([float(v) for v in row[1:1 + spec.d_in]])
            t_raw = row[1 + spec.d_in:1 + spec.d_in + n_t]
            target = int(t_raw[0]) if spec.kind == CLASSIFICATION else np.array([float(v) for v in t_raw])
            label = CLEAN if row[-2] == "clean" else QualityLabel.polluted(PollutionKind(row[-1]))
            out.append(Sample(sid, x, target, label))
    return tuple(out)


def _params_json(p: ModelParams) -> dict:
    return {"arch": p.arch, "task": p.task,
            "segments": [{"name": n, "shape": list(w.shape), "values": [repr(float(v)) for v in w.ravel()]}
                         for n, w in p.segments]}


def _params_from_json(d: dict) -> ModelParams:
    segs = tuple((s["name"], np.array([float(v) for v in s["values"]]).reshape(s["shape"]))
                 for s in d["segments"])
    return ModelParams(d["arch"], segs, d["task"])


def manifest(bundle: DatasetBundle) -> dict:
    spec = bundle.task
    return {
        "format": "clues-bundle",
        "version": 1,
        "regime": bundle.regime,
        "seed": bundle.seed,
        "n_clients": bundle.n_clients,
        "task": {k: getattr(spec, k) for k in spec.__dataclass_fields__},
        "plan": {"ratios": list(bundle.plan.ratios), "kinds": dict(bundle.plan.kinds),
                 "seed": bundle.plan.seed, "truncate_prefix": bundle.plan.truncate_prefix,
                 "bad_noise": bundle.plan.bad_noise},
        "files": {"clients": [f"client_{c}.csv" for c in range(bundle.n_clients)],
                  "val": "val.csv", "anchor": "anchor.csv"},
        "base": _params_json(bundle.base),
        "teachers": [_params_json(t.params) for t in bundle.teachers],
        "aux_teachers": [_params_json(t.params) for t in bundle.aux_teachers],
    }


def save_bundle(bundle: DatasetBundle, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = manifest(bundle)
    for c, samples in enumerate(bundle.clients):
        _write_samples(out / man["files"]["clients"][c], samples, bundle.task)
    _write_samples(out / "val.csv", bundle.val, bundle.task)
    _write_samples(out / "anchor.csv", bundle.anchor, bundle.task)
    with open(out / "manifest.json", "w") as f:
        json.dump(man, f, indent=1, sort_keys=True)
        f.write("\n")
    return out


def validate_manifest(man: dict) -> None:
    required = {"format", "version", "regime", "seed", "n_clients", "task", "plan", "files", "base",
                "teachers", "aux_teachers"}
    missing = required - set(man)
    if missing:
        raise ConfigError(f"manifest missing keys {sorted(missing)}")
    if man["format"] != "clues-bundle" or man["version"] != 1:
        raise ConfigError("unsupported bundle manifest format")
    if man["regime"] not in REGIMES:
        raise ConfigError(f"unknown regime {man['regime']!r}")
    if len(man["files"]["clients"]) != man["n_clients"] or len(man["plan"]["ratios"]) != man["n_clients"]:
        raise ConfigError("client count inconsistent across manifest")


def load_bundle(in_dir) -> DatasetBundle:
    src = Path(in_dir)
    with open(src / "manifest.json") as f:
        man = json.load(f)
    validate_manifest(man)
    spec = TaskSpec(**man["task"])
    p = man["plan"]
    plan = PollutionPlan(tuple(p["ratios"]), p["kinds"], p["seed"], p["truncate_prefix"], p["bad_noise"])
    clients = tuple(_read_samples(src / name, spec) for name in man["files"]["clients"])
    return DatasetBundle(
        regime=man["regime"], clients=clients,
        val=_read_samples(src / man["files"]["val"], spec),
        anchor=_read_samples(src / man["files"]["anchor"], spec),
        base=_params_from_json(man["base"]), task=spec,
        teachers=tuple(Teacher(_params_from_json(t)) for t in man["teachers"]),
        aux_teachers=tuple(Teacher(_params_from_json(t)) for t in man["aux_teachers"]),
        plan=plan, seed=man["seed"],
    )
