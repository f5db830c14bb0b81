from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clues.errors import ConfigError, NumericError, StateError, StepIndexError
from clues.model import Sample, init_adapter, make_params
from clues.optim import (ADAM, ADAMW, SGD, Checkpoint, OptimizerKind, OptimState, Trajectory, TrainingRunConfig,
                         hypothetical_direction, record_trajectory, step, train)

# Three scalar steps from theta=1.5 with grads (0.3, -1.2, 0.7), lr 0.1, computed in plain Python floats.
ORACLE_ADAM_THETA = 1.4621105297680126
ORACLE_ADAMW_THETA = 1.457758977912585
ORACLE_M = -0.013700000000000004
ORACLE_V = 0.0020183800900000015


@pytest.mark.parametrize("variant,expect", [(ADAM, ORACLE_ADAM_THETA), (ADAMW, ORACLE_ADAMW_THETA)])
def test_frozen_scalar_trajectory(variant, expect):
    kind = OptimizerKind(variant, lr=0.1, weight_decay=0.01 if variant == ADAMW else None)
    theta, state = np.array([1.5]), OptimState.fresh(1)
    for t, g in enumerate((0.3, -1.2, 0.7), start=1):
        theta, state, _ = step(kind, theta, state, np.array([g]), t)
    assert theta[0] == pytest.approx(expect, rel=1e-14)
    assert state.m[0] == pytest.approx(ORACLE_M, rel=1e-13)
    assert state.v[0] == pytest.approx(ORACLE_V, rel=1e-13)
    assert state.step == 3


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), variant=st.sampled_from([SGD, ADAM, ADAMW]))
def test_update_equals_minus_lr_times_direction(seed, variant):
    r = np.random.default_rng(seed)
    kind = OptimizerKind(variant, lr=float(r.uniform(1e-4, 0.5)),
                         weight_decay=0.05 if variant == ADAMW else None)
    theta = r.normal(size=7)
    state = OptimState.fresh(7)
    for t in range(1, 21):
        g = r.normal(size=7)
        new, state, d = step(kind, theta, state, g, t)
        np.testing.assert_array_equal(new - theta, (theta - kind.lr_at(t) * d) - theta)
        np.testing.assert_array_equal(new, theta - kind.lr_at(t) * d)
        theta = new


def test_first_step_moments_are_bias_corrected(rng):
    g = rng.normal(size=9)
    kind = OptimizerKind(ADAM, lr=1e-3)
    _, st1, _ = step(kind, np.zeros(9), OptimState.fresh(9), g, 1)
    np.testing.assert_allclose(st1.m / (1 - kind.beta1), g, rtol=1e-12, atol=0)
    np.testing.assert_allclose(st1.v / (1 - kind.beta2), g * g, rtol=1e-12, atol=0)


def test_step_index_and_gradient_validation():
    kind = OptimizerKind(ADAM, lr=0.1)
    with pytest.raises(StepIndexError):
        step(kind, np.zeros(2), OptimState.fresh(2), np.ones(2), 0)
    with pytest.raises(StepIndexError):
        step(kind, np.zeros(2), OptimState.fresh(2), np.ones(2), 2)
    with pytest.raises(NumericError):
        step(kind, np.zeros(2), OptimState.fresh(2), np.array([np.nan, 0.0]), 1)
    with pytest.raises(ConfigError):
        step(kind, np.zeros(2), OptimState.fresh(2), np.ones(3), 1)


@pytest.mark.parametrize("kwargs", [
    {"variant": "lion"}, {"lr": 0.0}, {"lr": ()}, {"variant": ADAM, "beta1": 1.0},
    {"variant": ADAM, "eps": 0.0}, {"variant": ADAMW, "weight_decay": None},
    {"variant": ADAMW, "weight_decay": -1.0},
])
def test_optimizer_kind_validation(kwargs):
    with pytest.raises(ConfigError):
        OptimizerKind(**kwargs)


def test_lr_schedule_holds_last_value():
    kind = OptimizerKind(SGD, lr=(0.3, 0.2, 0.1))
    assert [kind.lr_at(t) for t in (1, 2, 3, 4, 10)] == [0.3, 0.2, 0.1, 0.1, 0.1]
    assert kind.scaled(2.0).lr == (0.6, 0.4, 0.2)


def test_hypothetical_direction_matches_real_step_and_mutates_nothing(rng):
    kind = OptimizerKind(ADAMW, lr=0.01, weight_decay=0.1)
    theta = rng.normal(size=5)
    st0 = OptimState(rng.normal(size=5) * 0.1, rng.uniform(0.1, 1.0, size=5), 4)
    params = make_params("linear", (5, 1), rng)
    ck = Checkpoint(5, params.with_flat(theta), kind.lr_at(5), st0)
    g = rng.normal(size=5)
    m_before = st0.m.copy()
    d = hypothetical_direction(kind, ck, g)
    _, _, d_real = step(kind, theta, st0, g, 5)
    np.testing.assert_array_equal(d, d_real)
    np.testing.assert_array_equal(st0.m, m_before)
    batch = np.stack([g, 2 * g])
    db = hypothetical_direction(kind, ck, batch)
    np.testing.assert_array_equal(db[0], d)
    with pytest.raises(StateError):
        hypothetical_direction(kind, Checkpoint(1, params, 0.1, None), g)


def _data(rng, n=40):
    return [Sample(i, rng.normal(size=4), rng.normal(size=2)) for i in range(n)]


def test_train_checkpoint_cadence_and_step_labels(rng):
    params = make_params("mlp", (4, 3, 2), rng)
    ad = init_adapter(params, rank=2)
    data = _data(rng)
    kind = OptimizerKind(ADAMW, lr=0.01)
    res = train(TrainingRunConfig(params, ad, data, kind, epochs=2, batch_size=16, seed=1))
    assert res.steps == 6
    assert [c.t for c in res.trajectory.checkpoints] == [4, 7]
    assert res.trajectory.final().state.step == 6
    assert res.trajectory.final().trainable.equals(res.trainable)
    res2 = train(TrainingRunConfig(params, ad, data, kind, max_steps=5, batch_size=8, cadence=2, seed=1))
    assert [c.t for c in res2.trajectory.checkpoints] == [3, 5]
    assert res2.steps == 5


def test_train_is_deterministic_in_seed(rng):
    params = make_params("linear", (4, 2), rng)
    data = _data(rng)
    cfg = lambda s: TrainingRunConfig(params, None, data, OptimizerKind(SGD, lr=0.05), epochs=1, seed=s)  # noqa: E731
    a, b, c = train(cfg(3)), train(cfg(3)), train(cfg(4))
    np.testing.assert_array_equal(a.trainable.flat(), b.trainable.flat())
    assert not np.array_equal(a.trainable.flat(), c.trainable.flat())
    assert len(record_trajectory(cfg(3))) == 1


@pytest.mark.parametrize("kwargs", [{"batch_size": 0}, {"cadence": 0}, {"cadence": "step"}, {"max_steps": 0}])
def test_train_validation(rng, kwargs):
    params = make_params("linear", (4, 2), rng)
    with pytest.raises(ConfigError):
        train(TrainingRunConfig(params, None, _data(rng, 4), **kwargs))
    with pytest.raises(ConfigError):
        train(TrainingRunConfig(params, None, []))


def test_trajectory_requires_increasing_steps(rng):
    params = make_params("linear", (2, 2), rng)
    ck = Checkpoint(3, params, 0.1, None)
    with pytest.raises(StateError):
        Trajectory((ck, Checkpoint(3, params, 0.1, None)), "epoch", OptimizerKind(SGD), params)
    with pytest.raises(StateError):
        Trajectory((), "epoch", OptimizerKind(SGD), params).final()
