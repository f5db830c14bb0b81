"""Experiment configuration loaded from TOML.

Schema (every key optional; unknown sections or keys are rejected)::

    [bundle]     path | regime, clients, n_per_client, ratios, kinds, seed,
                 pollution_seed, anchor_size, val_size, task, arch, d_in,
                 hidden, d_out, noise, teacher_rank, teacher_shift,
                 truncate_prefix, bad_noise
    [workflow]   mode, rounds, client_sample_size, local_steps, epochs,
                 batch_size, cadence, rank, alpha, seed, fallback_ratio, threads
    [optimizer]  variant, lr, beta1, beta2, eps, weight_decay
    [scoring]    variant, layer, checkpoints, datainf_damping
    [merge]      method, density, weights, weight_policy
    [compare]    arms, scorers, fixed_score, ratio, sweep
    [output]     dir
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .datagen import DEFAULT_ANCHOR_SIZE, DEFAULT_VAL_SIZE, QUALITY_HET, REGIMES, PollutionPlan, TaskSpec
from .errors import ConfigError
from .federation import WorkflowConfig
from .merging import MergeMethod, MergeWeights
from .optim import ADAMW, OptimizerKind
from .scoring import SCORERS, DataInfConfig, ScoringConfig

ARMS = ("mixed", "oracle", "selected")


@dataclass(frozen=True)
class BundleSpec:
    path: str | None = None
    regime: str = QUALITY_HET
    clients: int = 20
    n_per_client: int = 500
    ratios: tuple[float, ...] | None = None
    kinds: Mapping[str, float] | None = None
    seed: int = 0
    pollution_seed: int = 0
    anchor_size: int = DEFAULT_ANCHOR_SIZE
    val_size: int = DEFAULT_VAL_SIZE
    task: str = "regression"
    arch: str = "mlp"
    d_in: int = 16
    hidden: int = 16
    d_out: int = 4
    noise: float = 0.1
    teacher_rank: int = 2
    teacher_shift: float = 1.0
    truncate_prefix: int = 4
    bad_noise: float = 2.0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.ratios is not None:
            object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
            if len(self.ratios) not in (1, self.clients):
                raise ConfigError(f"{len(self.ratios)} ratios given for {self.clients} clients")

    def task_spec(self) -> TaskSpec:
        return TaskSpec(self.task, self.arch, self.d_in, self.hidden, self.d_out, self.noise,
                        self.teacher_rank, self.teacher_shift)

    def plan(self, ratios: tuple[float, ...] | None = None) -> PollutionPlan:
        r = ratios if ratios is not None else (self.ratios or (0.0,))
        if len(r) == 1:
            r = tuple(r) * self.clients
        kw = {"kinds": dict(self.kinds)} if self.kinds else {}
        return PollutionPlan(tuple(r), seed=self.pollution_seed, truncate_prefix=self.truncate_prefix,
                             bad_noise=self.bad_noise, **kw)


@dataclass(frozen=True)
class ExperimentConfig:
    bundle: BundleSpec = field(default_factory=BundleSpec)
    workflow: WorkflowConfig = field(default_factory=WorkflowConfig)
    arms: tuple[str, ...] = ARMS
    scorers: tuple[str, ...] = ("clues",)
    fixed_score: float = 0.0
    ratio: float = 0.6
    sweep: tuple[float, ...] = ()
    out_dir: str | None = None
    echo: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for a in self.arms:
            if a not in ARMS:
                raise ConfigError(f"unknown arm {a!r}; expected a subset of {ARMS}")
        for s in self.scorers:
            if s not in SCORERS:
                raise ConfigError(f"unknown scorer {s!r}; expected a subset of {SCORERS}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError("compare.ratio must lie in [0, 1]")
        for r in self.sweep:
            if not 0.0 <= r <= 1.0:
                raise ConfigError("sweep levels must lie in [0, 1]")


_SECTIONS = {
    "bundle": {f.name for f in fields(BundleSpec)},
    "workflow": {"mode", "rounds", "client_sample_size", "local_steps", "epochs", "batch_size", "cadence",
                 "rank", "alpha", "seed", "fallback_ratio", "threads"},
    "optimizer": {"variant", "lr", "beta1", "beta2", "eps", "weight_decay"},
    "scoring": {"variant", "layer", "checkpoints", "datainf_damping"},
    "merge": {"method", "density", "weights", "weight_policy"},
    "compare": {"arms", "scorers", "fixed_score", "ratio", "sweep"},
    "output": {"dir"},
}


def _check_keys(raw: Mapping) -> None:
    for sec, body in raw.items():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        if not isinstance(body, Mapping):
            raise ConfigError(f"[{sec}] must be a table")
        extra = set(body) - _SECTIONS[sec]
        if extra:
            raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(sorted(extra))}")


def from_dict(raw: Mapping) -> ExperimentConfig:
    """Build and validate a config; every failure is a :class:`ConfigError`."""
    try:
        return _from_dict(raw)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def _from_dict(raw: Mapping) -> ExperimentConfig:
    _check_keys(raw)
    b = dict(raw.get("bundle", {}))
    if "ratios" in b:
        b["ratios"] = tuple(b["ratios"])
    bundle = BundleSpec(**b)

    o = dict(raw.get("optimizer", {}))
    if isinstance(o.get("lr"), list):
        o["lr"] = tuple(o["lr"])
    o.setdefault("variant", ADAMW)
    o.setdefault("lr", 0.03)
    if o["variant"] != ADAMW:
        o.setdefault("weight_decay", None)
    optimizer = OptimizerKind(**o)

    s = dict(raw.get("scoring", {}))
    damping = s.pop("datainf_damping", None)
    if "checkpoints" in s:
        s["checkpoints"] = tuple(s["checkpoints"])
    s.setdefault("variant", "sgd")
    if s["variant"] == "follow":
        s["variant"] = None
    scoring = ScoringConfig(**s)

    m = dict(raw.get("merge", {}))
    weights = m.pop("weights", None)
    policy = m.pop("weight_policy", "raw")
    merge = MergeMethod(weights=MergeWeights(tuple(weights), policy) if weights else None, **m)

    w = dict(raw.get("workflow", {}))
    workflow = WorkflowConfig(optimizer=optimizer, scoring=scoring, merge=merge,
                              datainf=DataInfConfig(damping), **w)

    c = dict(raw.get("compare", {}))
    for key in ("arms", "scorers", "sweep"):
        if key in c:
            c[key] = tuple(c[key])
    out = raw.get("output", {}).get("dir")
    return ExperimentConfig(bundle=bundle, workflow=workflow, out_dir=out, echo=_plain(raw), **c)


def load(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(raw)


def _plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def resolved(cfg: ExperimentConfig) -> dict:
    """Fully-resolved settings (defaults filled in) as plain JSON types."""
    wf = cfg.workflow
    return _plain({
        "bundle": asdict(cfg.bundle),
        # Thread count is left out: it must not change the report bytes.
        "workflow": {k: getattr(wf, k) for k in sorted(_SECTIONS["workflow"] - {"threads"})},
        "optimizer": asdict(wf.optimizer),
        "scoring": asdict(wf.scoring) | {"datainf_damping": wf.datainf.damping},
        "merge": {"method": wf.merge.method, "density": wf.merge.density,
                  "weights": list(wf.merge.weights.values) if wf.merge.weights else None,
                  "weight_policy": wf.merge.weights.policy if wf.merge.weights else None},
        "compare": {"arms": cfg.arms, "scorers": cfg.scorers, "fixed_score": cfg.fixed_score,
                    "ratio": cfg.ratio, "sweep": cfg.sweep},
    })


def default_out_dir(cfg: ExperimentConfig, fallback) -> Path:
    return Path(cfg.out_dir) if cfg.out_dir else Path(fallback)
