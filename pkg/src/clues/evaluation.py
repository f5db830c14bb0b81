"""Selection metrics, score AUC, and the mixed / oracle / selected comparison harness.

The report written to disk is a pure function of config and seeds. Wall-clock
timings vary between runs, so they are kept out of it and written to a
separate ``timing.json``.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import config as config_mod
from .datagen import DatasetBundle, gen_bundle, load_bundle
from .errors import CluesError, DataError, UndefinedMetricError
from .federation import (Federation, MessageLog, audit_messages, staged, run_stage1_training,
                         run_stage2_to_4_selection, run_stage5_6_retrain_merge, selected_datasets)
from .model import Sample, labels_sealed
from .scoring import QualityScore, write_scores_csv
from .selection import select_by_fixed_score, select_by_ratio, write_selection_manifest

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


# --- metrics --------------------------------------------------------------

@dataclass(frozen=True)
class SelectionMetrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    def __add__(self, other: SelectionMetrics) -> SelectionMetrics:
        return SelectionMetrics(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "accuracy": self.accuracy}


def quality_labels(samples: Iterable[Sample]) -> dict[int, bool]:
    """``{sample_id: is_clean}``. Reads ground truth, so never call it inside a sealed region."""
    return {s.id: s.quality_label.clean for s in samples}


def selection_metrics(selected_ids: Iterable[int], labels: Mapping[int, bool]) -> SelectionMetrics:
    """Confusion counts with Clean as the positive class."""
    sel = set(selected_ids)
    missing = sel - set(labels)
    if missing:
        raise DataError(f"selected ids without labels: {sorted(missing)[:5]}")
    tp = sum(1 for i, clean in labels.items() if clean and i in sel)
    fp = sum(1 for i, clean in labels.items() if not clean and i in sel)
    fn = sum(1 for i, clean in labels.items() if clean and i not in sel)
    tn = len(labels) - tp - fp - fn
    return SelectionMetrics(tp, fp, tn, fn)


def pooled(metrics: Iterable[SelectionMetrics]) -> SelectionMetrics:
    """Micro-average: sum confusion counts across clients."""
    out = SelectionMetrics(0, 0, 0, 0)
    for m in metrics:
        out = out + m
    return out


def _pairs(scores) -> list[tuple[int, float]]:
    if isinstance(scores, Mapping):
        return [(int(k), float(v)) for k, v in scores.items()]
    return [(q.sample_id, q.score) for q in scores]


def score_auc(scores: Sequence[QualityScore] | Mapping[int, float], labels: Mapping[int, bool]) -> float:
    """P(random Clean outscores random Polluted), ties counted as one half."""
    pairs = _pairs(scores)
    missing = [i for i, _ in pairs if i not in labels]
    if missing:
        raise DataError(f"scores without labels: {missing[:5]}")
    vals = np.array([s for _, s in pairs], dtype=np.float64)
    clean = np.array([labels[i] for i, _ in pairs], dtype=bool)
    n_c, n_p = int(clean.sum()), int((~clean).sum())
    if n_c == 0 or n_p == 0:
        raise UndefinedMetricError("AUC needs both clean and polluted samples")
    # Mid-ranks: tied values share the average of their positions.
    order = np.argsort(vals, kind="stable")
    sorted_vals = vals[order]
    ranks = np.empty(len(vals))
    i = 0
    while i < len(vals):
        j = i
        while j + 1 < len(vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[clean].sum() - n_c * (n_c + 1) / 2.0
    return float(u / (n_c * n_p))


# --- report ---------------------------------------------------------------

@dataclass
class RunReport:
    config: dict
    arms: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    audit: dict = field(default_factory=dict)
    sweep: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "config": self.config, "arms": self.arms,
                "errors": self.errors, "audit": self.audit, "sweep": self.sweep}

    def render(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=True) + "\n"

    @classmethod
    def parse(cls, text: str) -> RunReport:
        d = json.loads(text)
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise DataError(f"unsupported report schema version {version!r}")
        return cls(config=d["config"], arms=d["arms"], errors=d["errors"], audit=d["audit"],
                   sweep=d["sweep"], schema_version=version)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.render())
        return path

    @classmethod
    def load(cls, path) -> RunReport:
        return cls.parse(Path(path).read_text())


# --- comparison -----------------------------------------------------------

def build_bundle(spec: config_mod.BundleSpec, ratios: tuple[float, ...] | None = None) -> DatasetBundle:
    if spec.path and ratios is None:
        return load_bundle(spec.path)
    return gen_bundle(spec.regime, spec.clients, spec.n_per_client, spec.plan(ratios), spec.seed,
                      spec.task_spec(), spec.anchor_size, spec.val_size)


def _arm_result(final) -> dict:
    return {"val_loss": final.val_loss, "val_curve": list(final.val_curve), "merge": final.provenance,
            "sizes": list(final.sizes)}


@dataclass
class ComparisonArtifacts:
    report: RunReport
    timings: dict
    scores: dict = field(default_factory=dict)
    selections: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)
    trajectories: list = field(default_factory=list)


def run_comparison(cfg: config_mod.ExperimentConfig, bundle: DatasetBundle | None = None) -> ComparisonArtifacts:
    """Run the configured arms on one bundle and one set of seeds.

    Stage-1 training is shared by every scorer. A failing arm is recorded in
    ``report.errors`` and the remaining arms still run.
    """
    bundle = bundle if bundle is not None else build_bundle(cfg.bundle)
    fed = Federation(bundle, cfg.workflow)
    labels = quality_labels(s for c in bundle.clients for s in c)
    client_labels = [quality_labels(c) for c in bundle.clients]
    report = RunReport(config=config_mod.resolved(cfg))
    art = ComparisonArtifacts(report, {})
    timings = art.timings
    stage1 = None
    log_all = MessageLog()

    def guarded(arm: str, fn):
        try:
            return fn()
        except CluesError as exc:
            log.error("arm %s failed: %s", arm, exc)
            report.errors[arm] = f"{type(exc).__name__}: {exc}"
            return None

    if "selected" in cfg.arms:
        def stage1_fn():
            with labels_sealed():
                clients = fed.clients()
                server = fed.server()
                staged("stage1_training", timings, run_stage1_training, fed, clients, server, log_all)
            return clients, server
        stage1 = guarded("stage1", stage1_fn)

    if "mixed" in cfg.arms:
        def mixed():
            with labels_sealed():
                return run_stage5_6_retrain_merge(fed, bundle.clients, MessageLog())
        res = guarded("mixed", mixed)
        if res is not None:
            report.arms["mixed"] = _arm_result(res)
    if "oracle" in cfg.arms:
        clean_sets = [tuple(s for s in c if lab[s.id]) for c, lab in zip(bundle.clients, client_labels)]

        def oracle():
            with labels_sealed():
                return run_stage5_6_retrain_merge(fed, clean_sets, MessageLog())
        res = guarded("oracle", oracle)
        if res is not None:
            report.arms["oracle"] = _arm_result(res)

    if stage1 is not None:
        clients, server = stage1
        art.trajectories = ([server.trajectory] if server.trajectory is not None
                            else [c.trajectory for c in clients])
        for scorer in cfg.scorers:
            arm = f"selected:{scorer}"

            def selected(scorer=scorer):
                slog = MessageLog()
                with labels_sealed():
                    sel = staged(f"stage2_4_{scorer}", timings, run_stage2_to_4_selection,
                                 fed, clients, server, slog, scorer)
                    final = staged(f"stage5_6_{scorer}", timings, run_stage5_6_retrain_merge, fed,
                                   selected_datasets(fed, sel.selected), slog, server.global_adapter)
                return sel, final, slog
            res = guarded(arm, selected)
            if res is None:
                continue
            sel, final, slog = res
            art.scores[scorer] = sel.scores
            art.selections[scorer] = sel
            art.logs[scorer] = slog
            report.arms[arm] = _selected_summary(cfg, sel, final, client_labels, labels)
        audit_log = MessageLog()
        for m in log_all.messages + [m for lg in art.logs.values() for m in lg.messages]:
            audit_log.send(m.sender, m.receiver, m.kind, m.payload)
        audit = audit_messages(audit_log, bundle.clients)
        report.audit = {"messages": audit.n_messages, "uplink": audit.n_uplink,
                        "violations": list(audit.violations)}
    return art


def _selected_summary(cfg, sel, final, client_labels, labels) -> dict:
    per_client = [selection_metrics(ids, lab) for ids, lab in zip(sel.selected, client_labels)]
    all_scores = [q for sc in sel.scores for q in sc]
    try:
        auc = score_auc(all_scores, labels)
    except UndefinedMetricError:
        auc = None
    ablation = {
        "global_threshold": pooled(per_client).as_dict(),
        "fixed_score": pooled(selection_metrics(select_by_fixed_score(sc, cfg.fixed_score), lab)
                              for sc, lab in zip(sel.scores, client_labels)).as_dict(),
        "ratio": pooled(selection_metrics(select_by_ratio(sc, cfg.ratio), lab)
                        for sc, lab in zip(sel.scores, client_labels)).as_dict(),
    }
    out = _arm_result(final)
    out.update({
        "tau": sel.threshold.tau,
        "tau_provenance": dict(sel.threshold.provenance),
        "keep_fractions": [len(ids) / len(sc) for ids, sc in zip(sel.selected, sel.scores)],
        "fell_back": list(sel.fell_back),
        "metrics": [m.as_dict() for m in per_client],
        "pooled": pooled(per_client).as_dict(),
        "auc": auc,
        "ablation": ablation,
        "ablation_settings": {"fixed_score": cfg.fixed_score, "ratio": cfg.ratio},
    })
    return out


def proportion_sweep(cfg: config_mod.ExperimentConfig, levels: Sequence[float]) -> list[dict]:
    """One comparison per uniform pollution level; returns flat curve rows."""
    rows = []
    for level in levels:
        bundle = build_bundle(cfg.bundle, (float(level),))
        rep = run_comparison(cfg, bundle).report
        for arm, res in sorted(rep.arms.items()):
            rows.append({"level": float(level), "arm": arm, "val_loss": res["val_loss"],
                         "tau": res.get("tau"), "precision": res.get("pooled", {}).get("precision"),
                         "recall": res.get("pooled", {}).get("recall")})
        for arm, err in sorted(rep.errors.items()):
            rows.append({"level": float(level), "arm": arm, "error": err})
    return rows


def write_outputs(art: ComparisonArtifacts, bundle: DatasetBundle, out_dir) -> Path:
    """Report JSON, timing sidecar, score CSVs, selection manifests and metric tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    art.report.save(out / "report.json")
    (out / "timing.json").write_text(json.dumps(art.timings, sort_keys=True, indent=1) + "\n")
    for scorer, scores in art.scores.items():
        write_scores_csv(out / f"scores_{scorer}.csv", ((c, sc, scorer) for c, sc in enumerate(scores)))
        sel = art.selections[scorer]
        write_selection_manifest(out / f"selection_{scorer}.csv",
                                 ((c, sc, ids) for c, (sc, ids) in enumerate(zip(sel.scores, sel.selected))),
                                 sel.threshold.tau)
    write_tables(art.report, out)
    return out


def write_tables(report: RunReport, out_dir) -> list[Path]:
    """Flatten a report into plot-ready CSV tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    p = out / "arms.csv"
    with open(p, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["arm", "val_loss", "tau", "auc", "precision", "recall", "f1", "accuracy"])
        for arm, r in sorted(report.arms.items()):
            pm = r.get("pooled", {})
            w.writerow([arm, _fmt(r["val_loss"]), _fmt(r.get("tau")), _fmt(r.get("auc")),
                        _fmt(pm.get("precision")), _fmt(pm.get("recall")), _fmt(pm.get("f1")),
                        _fmt(pm.get("accuracy"))])
    paths.append(p)
    p = out / "curves.csv"
    with open(p, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["arm", "round", "val_loss"])
        for arm, r in sorted(report.arms.items()):
            for i, v in enumerate(r["val_curve"], start=1):
                w.writerow([arm, i, _fmt(v)])
    paths.append(p)
    p = out / "clients.csv"
    with open(p, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["arm", "client_id", "keep_fraction", "precision", "recall", "f1"])
        for arm, r in sorted(report.arms.items()):
            for c, (kf, m) in enumerate(zip(r.get("keep_fractions", []), r.get("metrics", []))):
                w.writerow([arm, c, _fmt(kf), _fmt(m["precision"]), _fmt(m["recall"]), _fmt(m["f1"])])
    paths.append(p)
    p = out / "ablation.csv"
    with open(p, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["arm", "selector", "precision", "recall", "f1", "accuracy"])
        for arm, r in sorted(report.arms.items()):
            for sel, m in sorted(r.get("ablation", {}).items()):
                w.writerow([arm, sel, _fmt(m["precision"]), _fmt(m["recall"]), _fmt(m["f1"]),
                            _fmt(m["accuracy"])])
    paths.append(p)
    if report.sweep:
        p = out / "sweep.csv"
        keys = ["level", "arm", "val_loss", "tau", "precision", "recall", "error"]
        with open(p, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(keys)
            for row in report.sweep:
                w.writerow([_fmt(row.get(k)) if k not in ("arm", "error") else row.get(k, "") for k in keys])
        paths.append(p)
    return paths


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)
