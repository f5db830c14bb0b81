"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdicts are
repeated in an "acceptance criteria" section at the end of the session.
"""
from __future__ import annotations

import dataclasses
import gc
import time

import numpy as np
import pytest

from clues import config as config_mod
from clues.datagen import IID, QUALITY_HET, PollutionPlan, TaskSpec, gen_bundle
from clues.evaluation import quality_labels, run_comparison, score_auc, selection_metrics
from clues.federation import FEDERATED, MERGE_ONCE, Federation, MessageLog, WorkflowConfig, full_pipeline, \
    run_stage5_6_retrain_merge, selected_datasets
from clues.merging import LINEAR, TASK_ARITHMETIC, TIES, MergeMethod, linear_merge, task_arithmetic_merge, \
    ties_merge
from clues.model import LoraAdapter, Sample, batch_grads, finite_diff_grad, init_adapter, make_params, \
    mean_loss, per_sample_grad, per_sample_loss
from clues.optim import ADAM, ADAMW, SGD, Checkpoint, OptimizerKind, OptimState, Trajectory, \
    hypothetical_direction, step
from clues.scoring import DataInfConfig, ScoringConfig, datainf_scores, score_dataset

pytestmark = pytest.mark.slow

K, N_PER_CLIENT = 4, 500


def _bundle(regime: str, ratios, seed: int = 0):
    return gen_bundle(regime, len(ratios), N_PER_CLIENT, PollutionPlan(tuple(ratios), seed=seed), seed=seed,
                      spec=TaskSpec(), anchor_size=10, val_size=100)


def _experiment(bundle_raw: dict, workflow_raw: dict | None = None, arms=("mixed", "oracle", "selected")):
    return config_mod.from_dict({"bundle": bundle_raw, "workflow": workflow_raw or {},
                                 "compare": {"arms": list(arms)}})


# --- 1 -------------------------------------------------------------------------------------------

def test_criterion_01_gradients_match_finite_differences(record_criterion):
    r = np.random.default_rng(2024)
    worst, t0 = 0.0, time.perf_counter()
    for i in range(50):
        arch = ("linear", "mlp")[i % 2]
        task = ("regression", "classification")[(i // 2) % 2]
        d_in, hidden, d_out = (int(v) for v in r.integers(2, 9, size=3))
        dims = (d_in, d_out) if arch == "linear" else (d_in, hidden, d_out)
        params = make_params(arch, dims, r, task)
        y = int(r.integers(d_out)) if task == "classification" else r.normal(size=d_out)
        z = Sample(i, r.normal(size=d_in), y)
        if i % 3 == 0:
            point = params.flat()
            fn = lambda v, p=params, z=z: per_sample_loss(p.with_flat(v), None, z)  # noqa: E731
            an = per_sample_grad(params, None, z)
        else:
            rank = int(r.integers(1, min(d_in, d_out, hidden if arch == "mlp" else d_out) + 1))
            ad = init_adapter(params, rank=rank, seed=i)
            ad = ad.with_flat(r.normal(size=ad.flat().size) * 0.5)
            point = ad.flat()
            fn = lambda v, a=ad, p=params, z=z: per_sample_loss(p, a.with_flat(v), z)  # noqa: E731
            an = per_sample_grad(params, ad, z)
        assert point.size <= 200
        fd = finite_diff_grad(fn, point, h=1e-5)
        worst = max(worst, float(np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-300)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 5.0
    record_criterion(1, ok, f"max relative error {worst:.2e} (gate 1e-6), {elapsed:.2f}s (gate 5s)")
    assert ok


# --- 2 -------------------------------------------------------------------------------------------

def test_criterion_02_optimizer_contract(record_criterion):
    r = np.random.default_rng(7)
    params = make_params("linear", (6, 2), r)
    mismatches = 0
    for variant in (SGD, ADAM, ADAMW):
        kind = OptimizerKind(variant, lr=tuple(r.uniform(1e-4, 0.1, size=50)),
                             weight_decay=0.02 if variant == ADAMW else None)
        theta = r.normal(size=12)
        state = OptimState.fresh(12)
        for t in range(1, 1001):
            g = r.normal(size=12) * 10 ** r.uniform(-3, 1)
            ck = Checkpoint(t, params.with_flat(theta), kind.lr_at(t), state)
            expected_dir = hypothetical_direction(kind, ck, g)
            new, state, d = step(kind, theta, state, g, t)
            if not (np.array_equal(d, expected_dir) and np.array_equal(new, theta - kind.lr_at(t) * expected_dir)):
                mismatches += 1
            theta = new
    g = r.normal(size=12)
    kind = OptimizerKind(ADAM, lr=0.01)
    _, st1, _ = step(kind, np.zeros(12), OptimState.fresh(12), g, 1)
    m_err = float(np.max(np.abs(st1.m / (1 - kind.beta1) - g)))
    v_err = float(np.max(np.abs(st1.v / (1 - kind.beta2) - g * g)))
    ok = mismatches == 0 and m_err <= 1e-12 and v_err <= 1e-12
    record_criterion(2, ok, f"{mismatches} inexact updates in 3x1000 steps; first-step moment errors "
                            f"{m_err:.1e}, {v_err:.1e} (gate 1e-12)")
    assert ok


# --- 3 -------------------------------------------------------------------------------------------

def test_criterion_03_first_order_score_oracle(record_criterion):
    # Well-specified quadratic regression: targets come from the model plus small noise, so residuals
    # (and the exact second-order remainder eta^2/2 g_z^T H g_z) are at the scale of a fitted model.
    r = np.random.default_rng(3)
    eta = 1e-4
    worst = 0.0
    for trial in range(100):
        params = make_params("linear", (8, 3), r)
        w = params.flat().reshape(3, 8)
        xs = r.normal(size=(11, 8))
        ys = xs @ w.T + 0.1 * r.normal(size=(11, 3))
        samples = [Sample(i, xs[i], ys[i]) for i in range(11)]
        z, val = samples[0], samples[1:]
        traj = Trajectory((Checkpoint(1, params, eta, None),), 1, OptimizerKind(SGD, lr=eta), params)
        score = score_dataset([z], val, traj)[0].score
        theta_new, _, _ = step(OptimizerKind(SGD, lr=eta), params.flat(), OptimState.fresh(24),
                               per_sample_grad(params, None, z), 1)
        before = sum(per_sample_loss(params, None, v) for v in val)
        after = sum(per_sample_loss(params.with_flat(theta_new), None, v) for v in val)
        worst = max(worst, abs((after - before) + score))
    ok = worst <= 1e-6
    record_criterion(3, ok, f"max |dL_val + eta<g_val, g_z>| = {worst:.2e} over 100 trials (gate 1e-6)")
    assert ok


# --- 4 -------------------------------------------------------------------------------------------

def test_criterion_04_datainf_matches_dense_solve(record_criterion):
    r = np.random.default_rng(4)
    worst = 0.0
    for trial in range(20):
        params = make_params("linear", (4, 3), r)
        ad = init_adapter(params, rank=2, seed=trial)
        ad = ad.with_flat(r.normal(size=ad.flat().size))
        assert ad.flat().size <= 20
        n = 1 + trial % 6
        train = [Sample(i, r.normal(size=4), r.normal(size=3)) for i in range(n)]
        val = [Sample(100 + i, r.normal(size=4), r.normal(size=3)) for i in range(5)]
        lam = float(r.uniform(0.01, 1.0))
        got = np.array([q.score for q in datainf_scores(train, val, Checkpoint(1, ad, 0.1, None), params,
                                                        DataInfConfig(lam))])
        g = batch_grads(params, ad, train)[1]
        v = batch_grads(params, ad, val)[1].sum(axis=0)
        eye = np.eye(g.shape[1])
        # Average of per-sample damped inverses; for n = 1 this is exactly (G + lam I)^-1.
        h_inv = sum(np.linalg.solve(np.outer(gi, gi) + lam * eye, eye) for gi in g) / n
        dense = g @ (h_inv @ v)
        if n == 1:
            lit = g @ np.linalg.solve(np.outer(g[0], g[0]) + lam * eye, v)
            worst = max(worst, float(np.max(np.abs(got - lit) / np.abs(lit))))
        worst = max(worst, float(np.max(np.abs(got - dense) / np.abs(dense))))
    ok = worst <= 1e-8
    record_criterion(4, ok, f"max relative deviation from dense damped solve {worst:.2e} (gate 1e-8)")
    assert ok


# --- 5 -------------------------------------------------------------------------------------------

def test_criterion_05_score_separation(record_criterion):
    bundle = _bundle(IID, [0.4] * K)
    labels = quality_labels(s for c in bundle.clients for s in c)
    t0 = time.perf_counter()
    res = full_pipeline(bundle, WorkflowConfig(mode=MERGE_ONCE))
    elapsed = time.perf_counter() - t0
    auc = score_auc([q for sc in res.selection.scores for q in sc], labels)
    ok = auc >= 0.90 and elapsed <= 120.0
    record_criterion(5, ok, f"AUC {auc:.4f} (gate 0.90), full pipeline {elapsed:.1f}s (gate 120s)")
    assert ok


# --- 6 -------------------------------------------------------------------------------------------

def test_criterion_06_threshold_behaviour(record_criterion):
    taus, recalls = [], []
    for level in (0.2, 0.5, 0.8):
        bundle = _bundle(IID, [level] * K)
        res = full_pipeline(bundle, WorkflowConfig(mode=MERGE_ONCE))
        m = sum((selection_metrics(ids, quality_labels(c)) for ids, c in zip(res.selection.selected, bundle.clients)),
                start=selection_metrics([], {}))
        taus.append(res.selection.threshold.tau)
        recalls.append(m.recall)
    monotone = all(b <= a for a, b in zip(taus, taus[1:]))
    ok = all(rc >= 0.95 for rc in recalls) and monotone
    record_criterion(6, ok, "clean recall at (20%, 50%, 80%) = (" + ", ".join(f"{x:.3f}" for x in recalls)
                     + ") gate 0.95; tau = (" + ", ".join(f"{x:.3g}" for x in taus)
                     + f") non-increasing: {monotone}")
    assert ok


# --- 7 -------------------------------------------------------------------------------------------

def test_criterion_07_heterogeneity_ordering(record_criterion):
    ratios = (0.8, 0.2, 0.1, 0.5)
    cfg = _experiment({"regime": QUALITY_HET, "clients": K, "n_per_client": N_PER_CLIENT, "ratios": list(ratios)},
                      arms=("selected",))
    rep = run_comparison(cfg).report
    arm = rep.arms["selected:clues"]
    f1 = {k: arm["ablation"][k]["f1"] for k in ("global_threshold", "fixed_score", "ratio")}
    ordered = f1["global_threshold"] > f1["fixed_score"] > f1["ratio"]
    target = [round(1 - r, 6) for r in ratios]
    keep = arm["keep_fractions"]
    close = all(abs(a - b) <= 0.15 for a, b in zip(keep, target))
    ok = ordered and close
    record_criterion(7, ok, f"pooled F1 global {f1['global_threshold']:.3f} / fixed {f1['fixed_score']:.3f} / "
                            f"ratio {f1['ratio']:.3f} (ordered: {ordered}); keep fractions ("
                     + ", ".join(f"{x:.3f}" for x in keep) + f") vs {tuple(target)} within 0.15: {close}")
    assert ok


# --- 8 -------------------------------------------------------------------------------------------

def test_criterion_08_end_to_end_ordering(record_criterion):
    parts, ok = [], True
    for mode, extra in ((MERGE_ONCE, {}), (FEDERATED, {"rounds": 30})):
        cfg = _experiment({"regime": IID, "clients": K, "n_per_client": N_PER_CLIENT, "ratios": [0.4]},
                          {"mode": mode, **extra})
        rep = run_comparison(cfg).report
        oracle = rep.arms["oracle"]["val_loss"]
        sel = rep.arms["selected:clues"]["val_loss"]
        mixed = rep.arms["mixed"]["val_loss"]
        gap = (sel - oracle) / oracle
        mode_ok = oracle <= sel < mixed and gap <= 0.10
        ok = ok and mode_ok
        parts.append(f"{mode}: oracle {oracle:.4f} <= selected {sel:.4f} < mixed {mixed:.4f} "
                     f"[{oracle <= sel < mixed}], gap {gap:+.1%} (gate 10%)")
    record_criterion(8, ok, "; ".join(parts))
    assert ok


# --- 9 -------------------------------------------------------------------------------------------

def test_criterion_09_merge_identities(record_criterion):
    r = np.random.default_rng(9)

    def rand_ad():
        return LoraAdapter((("fc1", r.normal(size=(4, 16)), r.normal(size=(16, 4))),
                            ("fc2", r.normal(size=(4, 16)), r.normal(size=(4, 4)))), 4, 4.0)

    a, b = rand_ad(), rand_ad()
    ties_id = ties_merge([a], density=1.0).equals(a)
    ta_id = task_arithmetic_merge([a, b], (1.0, 0.0)).equals(a)
    lin_id = all(linear_merge([a] * k).equals(a) for k in (2, 3, 5))
    x = LoraAdapter((("fc1", np.array([[1.0, -1.0]]), np.array([[1.0], [-1.0]])),), 1, 1.0)
    y = LoraAdapter((("fc1", np.array([[1.0, 1.0]]), np.array([[1.0], [1.0]])),), 1, 1.0)
    tied = ties_merge([x, y], density=1.0)
    tie_ok = (np.array_equal(tied.factors("fc1")[0], [[1.0, 0.0]])
              and np.array_equal(tied.factors("fc1")[1], [[1.0], [0.0]]))
    ok = ties_id and ta_id and lin_id and tie_ok
    record_criterion(9, ok, f"TIES single {ties_id}, TA (1,0) {ta_id}, linear idempotent {lin_id}, "
                            f"TIES tie case {tie_ok}")
    assert ok


# --- 10 ------------------------------------------------------------------------------------------

def test_criterion_10_single_round_federated_equals_merge_once(record_criterion):
    bundle = _bundle(QUALITY_HET, (0.8, 0.2, 0.1, 0.5), seed=1)
    once_cfg = WorkflowConfig(mode=MERGE_ONCE)
    sel = full_pipeline(bundle, once_cfg).selection.selected
    checks = []
    for method in (LINEAR, TASK_ARITHMETIC, TIES):
        mm = MergeMethod(method)
        once = Federation(bundle, dataclasses.replace(once_cfg, merge=mm))
        fed = Federation(bundle, dataclasses.replace(once_cfg, mode=FEDERATED, rounds=1, local_steps=None,
                                                     client_sample_size=None, merge=mm))
        data = selected_datasets(once, sel)
        a = run_stage5_6_retrain_merge(once, data, MessageLog())
        b = run_stage5_6_retrain_merge(fed, data, MessageLog())
        checks.append(a.adapter.flat().tobytes() == b.adapter.flat().tobytes() and a.val_loss == b.val_loss
                      and a.val_loss == mean_loss(bundle.base, b.adapter, bundle.val))
    ok = all(checks)
    record_criterion(10, ok, "bit-identical merged adapter and val loss for linear / task arithmetic / TIES: "
                     + ", ".join(str(c) for c in checks))
    assert ok


# --- 11 ------------------------------------------------------------------------------------------

def test_criterion_11_scoring_complexity(record_criterion):
    bundle = gen_bundle(IID, 1, 4000, PollutionPlan((0.0,)), 0, TaskSpec(), 10, 800)
    r = np.random.default_rng(11)
    ad = init_adapter(bundle.base, rank=4, seed=1)
    ads = [ad.with_flat(r.normal(size=ad.flat().size) * 0.1) for _ in range(4)]
    train, val = list(bundle.clients[0]), list(bundle.val)

    def run(n_ck, n_train, n_val):
        traj = Trajectory(tuple(Checkpoint(i + 1, ads[i], 0.01, None) for i in range(n_ck)), 1,
                          OptimizerKind(SGD, lr=0.01), bundle.base)
        t0 = time.perf_counter()
        score_dataset(train[:n_train], val[:n_val], traj, ScoringConfig(variant=SGD))
        return time.perf_counter() - t0

    points = [(2, 2000, 400), (4, 2000, 400), (2, 4000, 400), (2, 2000, 800)]
    for p in points:
        run(*p)  # warm-up
    # Round-robin repeats so slow drift in machine load hits every point alike; keep the fastest.
    times = np.full(len(points), np.inf)
    gc.disable()
    try:
        for _ in range(9):
            for i, p in enumerate(points):
                times[i] = min(times[i], run(*p))
    finally:
        gc.enable()
    work = np.array([a * b * c for a, b, c in points], dtype=float)
    c = float(times @ work / (work @ work))
    ratios = times / (c * work)
    ok = bool(np.all(np.abs(ratios - 1.0) <= 0.25))
    record_criterion(11, ok, "measured / fitted c*N*|D|*|D_val| at base, 2N, 2|D|, 2|D_val| = ("
                     + ", ".join(f"{x:.3f}" for x in ratios) + ") gate +-25%")
    assert ok


# --- 12 ------------------------------------------------------------------------------------------

def test_criterion_12_determinism_and_privacy(record_criterion):
    results = []
    for mode, extra in ((MERGE_ONCE, {}), (FEDERATED, {"rounds": 5, "client_sample_size": 3})):
        base = _experiment({"regime": QUALITY_HET, "clients": K, "n_per_client": 200, "ratios": [0.8, 0.2, 0.1, 0.5]},
                           {"mode": mode, **extra})
        base = dataclasses.replace(base, scorers=("clues", "datainf", "loss", "random"))
        renders, violations = [], 0
        for threads in (1, 4, 8):
            cfg = dataclasses.replace(base, workflow=dataclasses.replace(base.workflow, threads=threads))
            rep = run_comparison(cfg).report
            renders.append(rep.render().encode("utf-8"))
            violations += len(rep.audit["violations"]) + len(rep.errors)
        results.append((mode, len(set(renders)) == 1, violations))
    ok = all(same and v == 0 for _, same, v in results)
    record_criterion(12, ok, "; ".join(f"{m}: byte-identical at 1/4/8 threads {s}, audit violations {v}"
                                       for m, s, v in results))
    assert ok
