from __future__ import annotations

import numpy as np
import pytest

from clues.datagen import PollutionPlan, TaskSpec, gen_bundle
from clues.model import LoraAdapter, ModelParams, Sample


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_instance():
    """Fixed 4-3-2 MLP with a rank-2 adapter on both layers and five samples.

    The same draws feed the complex-step oracle whose outputs are frozen in
    the tests.
    """
    r = np.random.default_rng(12345)
    w1 = r.normal(size=(3, 4)) * 0.5
    w2 = r.normal(size=(2, 3)) * 0.5
    a1 = r.normal(size=(2, 4)) * 0.3
    b1 = r.normal(size=(3, 2)) * 0.3
    a2 = r.normal(size=(2, 3)) * 0.3
    b2 = r.normal(size=(2, 2)) * 0.3
    x = r.normal(size=(5, 4))
    y = r.normal(size=(5, 2))
    base = ModelParams("mlp", (("fc1", w1), ("fc2", w2)))
    adapter = LoraAdapter((("fc1", a1, b1), ("fc2", a2, b2)), rank=2, alpha=2.0)
    samples = [Sample(i, x[i], y[i]) for i in range(5)]
    return base, adapter, samples


@pytest.fixture(scope="session")
def small_bundle():
    plan = PollutionPlan((0.5, 0.2, 0.1, 0.4), seed=3)
    return gen_bundle("quality-het", 4, 60, plan, seed=3, spec=TaskSpec(), anchor_size=10, val_size=30)


def _random_adapter(rng: np.random.Generator, shapes=((3, 4), (2, 3)), rank: int = 2,
                    alpha: float = 2.0) -> LoraAdapter:
    layers = []
    for i, (d_out, d_in) in enumerate(shapes):
        layers.append((f"fc{i + 1}", rng.normal(size=(rank, d_in)), rng.normal(size=(d_out, rank))))
    return LoraAdapter(tuple(layers), rank, alpha)


@pytest.fixture
def make_adapter():
    return _random_adapter


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def record_criterion(request):
    """Store a one-line PASS/FAIL verdict for an acceptance criterion, shown in the terminal summary."""
    store = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        store[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        terminalreporter.write_line(store[number])
