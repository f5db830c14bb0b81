"""Command-line entry point: ``clues {gen,run,compare,score,merge,report}``.

Exit status is 0 on success, 2 for invalid configuration or arguments and 1
for any other failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .checkpoint_io import load_adapter, load_trajectory, save_adapter, save_trajectory
from .datagen import (DEFAULT_ANCHOR_SIZE, DEFAULT_VAL_SIZE, REGIMES, PollutionPlan, TaskSpec, gen_bundle,
                      load_bundle, save_bundle)
from .errors import CluesError, ConfigError
from .evaluation import RunReport, build_bundle, proportion_sweep, run_comparison, write_outputs, write_tables
from .merging import LINEAR, METHODS, TASK_ARITHMETIC, MergeMethod, MergeWeights, merge
from .model import labels_sealed
from .scoring import (SCORERS, DataInfConfig, ScoringConfig, datainf_scores, loss_scores, random_scores,
                      score_dataset, write_scores_csv)

log = logging.getLogger("clues")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _kinds(text: str) -> dict[str, float]:
    out = {}
    for part in text.split(","):
        name, _, weight = part.partition(":")
        out[name.strip()] = float(weight) if weight else 1.0
    return out


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clues", description="Collaborative data-quality control simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate and persist a benchmark bundle")
    g.add_argument("--regime", choices=REGIMES, default="quality-het")
    g.add_argument("--ratios", type=_floats, required=True, help="per-client pollution ratios, e.g. 0.8,0.2")
    g.add_argument("--clients", type=int, help="client count (defaults to the number of ratios)")
    g.add_argument("--n", type=int, default=500, help="samples per client")
    g.add_argument("--kinds", type=_kinds, help="pollution mix, e.g. label_substitution:1,truncation:1")
    g.add_argument("--task", choices=("regression", "classification"), default="regression")
    g.add_argument("--arch", choices=("linear", "mlp"), default="mlp")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--anchor-size", type=int, default=DEFAULT_ANCHOR_SIZE)
    g.add_argument("--val-size", type=int, default=DEFAULT_VAL_SIZE)
    g.add_argument("--out", required=True)

    for name, text in (("run", "run the selection pipeline"), ("compare", "run mixed/oracle/selected arms")):
        r = sub.add_parser(name, help=text)
        r.add_argument("--config", required=True)
        r.add_argument("--out")
        r.add_argument("--threads", type=int)

    s = sub.add_parser("score", help="score a persisted bundle against a saved trajectory")
    s.add_argument("--bundle", required=True)
    s.add_argument("--trajectory", required=True)
    s.add_argument("--client", type=int, required=True)
    s.add_argument("--scorer", choices=SCORERS, default="clues")
    s.add_argument("--variant", choices=("sgd", "adam", "adamw"))
    s.add_argument("--layer")
    s.add_argument("--seed", type=int, default=0, help="seed for the random scorer")
    s.add_argument("--out", required=True)

    m = sub.add_parser("merge", help="merge adapter checkpoints offline")
    m.add_argument("inputs", nargs="+")
    m.add_argument("-o", "--output", required=True)
    m.add_argument("--method", choices=METHODS + ("task-arithmetic",), default=LINEAR)
    m.add_argument("--density", type=float, default=0.2)
    m.add_argument("--weights", type=_floats)
    m.add_argument("--normalize", action="store_true", help="rescale weights to sum to one")

    rp = sub.add_parser("report", help="render a report.json into CSV tables")
    rp.add_argument("report")
    rp.add_argument("--out", required=True)
    return p


def _cmd_gen(a) -> int:
    k = a.clients or len(a.ratios)
    ratios = a.ratios * k if len(a.ratios) == 1 else a.ratios
    kw = {"kinds": a.kinds} if a.kinds else {}
    plan = PollutionPlan(ratios, seed=a.seed, **kw)
    spec = TaskSpec(kind=a.task, arch=a.arch)
    bundle = gen_bundle(a.regime, k, a.n, plan, a.seed, spec, a.anchor_size, a.val_size)
    out = save_bundle(bundle, a.out)
    print(f"wrote bundle with {k} clients to {out}")
    return 0


def _load_cfg(a) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(a.config)
    if a.threads is not None:
        cfg = dataclasses.replace(cfg, workflow=dataclasses.replace(cfg.workflow, threads=a.threads))
    return cfg


def _cmd_run(a, arms) -> int:
    cfg = _load_cfg(a)
    if arms is not None:
        cfg = dataclasses.replace(cfg, arms=arms)
    out = Path(a.out) if a.out else config_mod.default_out_dir(cfg, "clues-out")
    bundle = build_bundle(cfg.bundle)
    art = run_comparison(cfg, bundle)
    if cfg.sweep and arms is None:
        art.report.sweep = proportion_sweep(cfg, cfg.sweep)
    write_outputs(art, bundle, out)
    for i, traj in enumerate(art.trajectories):
        save_trajectory(out / "trajectories" / (f"client{i}" if len(art.trajectories) > 1 else "global"), traj)
    for arm, err in art.report.errors.items():
        print(f"arm {arm} failed: {err}", file=sys.stderr)
    print(f"wrote report to {out / 'report.json'}")
    return 1 if art.report.errors and not art.report.arms else 0


def _cmd_score(a) -> int:
    bundle = load_bundle(a.bundle)
    if not 0 <= a.client < bundle.n_clients:
        raise ConfigError(f"client {a.client} not in bundle (0..{bundle.n_clients - 1})")
    traj = load_trajectory(a.trajectory, bundle.base)
    data = bundle.clients[a.client]
    with labels_sealed():
        if a.scorer == "clues":
            scores = score_dataset(data, bundle.val, traj, ScoringConfig(variant=a.variant, layer=a.layer))
        elif a.scorer == "loss":
            scores = loss_scores(data, traj.final(), bundle.base)
        elif a.scorer == "datainf":
            scores = datainf_scores(data, bundle.val, traj.final(), bundle.base, DataInfConfig())
        else:
            scores = random_scores(data, a.seed)
    write_scores_csv(a.out, [(a.client, scores, a.scorer)])
    print(f"wrote {len(scores)} scores to {a.out}")
    return 0


def _cmd_merge(a) -> int:
    method = TASK_ARITHMETIC if a.method == "task-arithmetic" else a.method
    weights = MergeWeights(a.weights, "sum-to-one" if a.normalize else "raw") if a.weights else None
    mm = MergeMethod(method, a.density, weights)
    adapters = [load_adapter(p) for p in a.inputs]
    merged, prov = merge(adapters, mm)
    prov["inputs"] = [str(p) for p in a.inputs]
    save_adapter(a.output, merged, prov)
    print(f"wrote merged adapter to {a.output}")
    return 0


def _cmd_report(a) -> int:
    rep = RunReport.load(a.report)
    paths = write_tables(rep, a.out)
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if a.command == "gen":
            return _cmd_gen(a)
        if a.command == "run":
            return _cmd_run(a, ("selected",))
        if a.command == "compare":
            return _cmd_run(a, None)
        if a.command == "score":
            return _cmd_score(a)
        if a.command == "merge":
            return _cmd_merge(a)
        return _cmd_report(a)
    except ConfigError as exc:
        print(f"clues: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except CluesError as exc:
        print(f"clues: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report any failure with a nonzero status
        print(f"clues: [{a.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
