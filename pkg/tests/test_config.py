from __future__ import annotations

import pytest

from clues import config as config_mod
from clues.errors import ConfigError
from clues.merging import TIES
from clues.optim import ADAM, ADAMW


def test_defaults():
    cfg = config_mod.from_dict({})
    assert cfg.arms == ("mixed", "oracle", "selected")
    assert cfg.scorers == ("clues",)
    assert cfg.workflow.optimizer.variant == ADAMW
    assert cfg.workflow.optimizer.lr == 0.03
    assert cfg.workflow.scoring.variant == "sgd"
    assert cfg.bundle.anchor_size == 10


def test_full_toml_file(tmp_path):
    p = tmp_path / "exp.toml"
    p.write_text("""
[bundle]
regime = "iid"
clients = 2
n_per_client = 30
ratios = [0.4]
[workflow]
mode = "federated"
rounds = 5
threads = 2
[optimizer]
variant = "adam"
lr = [0.1, 0.05]
[scoring]
variant = "follow"
datainf_damping = 0.5
[merge]
method = "ties"
density = 0.4
weights = [1.0, 3.0]
weight_policy = "sum-to-one"
[compare]
scorers = ["clues", "random"]
sweep = [0.2, 0.8]
[output]
dir = "out"
""")
    cfg = config_mod.load(p)
    assert cfg.bundle.ratios == (0.4,)
    assert cfg.bundle.plan().ratios == (0.4, 0.4)
    assert cfg.workflow.mode == "federated" and cfg.workflow.threads == 2
    assert cfg.workflow.optimizer.variant == ADAM and cfg.workflow.optimizer.weight_decay is None
    assert cfg.workflow.optimizer.lr == (0.1, 0.05)
    assert cfg.workflow.scoring.variant is None
    assert cfg.workflow.datainf.damping == 0.5
    assert cfg.workflow.merge.method == TIES
    assert cfg.workflow.merge.weights.resolved() == (0.25, 0.75)
    assert cfg.sweep == (0.2, 0.8)
    assert config_mod.default_out_dir(cfg, "x").name == "out"
    res = config_mod.resolved(cfg)
    assert "threads" not in res["workflow"]
    assert res["merge"]["weights"] == [1.0, 3.0]


@pytest.mark.parametrize("raw", [
    {"bundel": {}},
    {"bundle": {"clientz": 3}},
    {"bundle": 3},
    {"bundle": {"regime": "nope"}},
    {"bundle": {"clients": 3, "ratios": [0.1, 0.2]}},
    {"workflow": {"mode": "gossip"}},
    {"optimizer": {"lr": -1.0}},
    {"scoring": {"variant": "lbfgs"}},
    {"merge": {"method": "avg"}},
    {"compare": {"arms": ["best"]}},
    {"compare": {"scorers": ["magic"]}},
    {"compare": {"ratio": 2.0}},
    {"compare": {"sweep": [1.5]}},
    {"workflow": {"rounds": "ten"}},
])
def test_invalid_configs_raise_config_error(raw):
    with pytest.raises(ConfigError):
        config_mod.from_dict(raw)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        config_mod.load(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[bundle\n")
    with pytest.raises(ConfigError):
        config_mod.load(bad)
