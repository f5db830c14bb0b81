from __future__ import annotations

import json

import numpy as np

from clues.checkpoint_io import load_adapter, read_provenance, save_adapter
from clues.cli import main
from clues.model import init_adapter, make_params

CONFIG = """
[bundle]
clients = 3
n_per_client = 40
ratios = [0.5, 0.2, 0.3]
val_size = 20
[workflow]
epochs = 2
[compare]
sweep = [0.3]
"""


def test_gen_then_score(tmp_path, capsys):
    out = tmp_path / "bundle"
    assert main(["gen", "--ratios", "0.4", "--clients", "2", "--n", "30", "--out", str(out)]) == 0
    assert (out / "manifest.json").exists()
    cfg = tmp_path / "exp.toml"
    cfg.write_text(f'[bundle]\npath = "{out}"\n[workflow]\nepochs = 1\n')
    run_dir = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(run_dir)]) == 0
    traj = run_dir / "trajectories" / "client0"
    assert (traj / "trajectory.json").exists()
    for scorer in ("clues", "loss", "datainf", "random"):
        dest = tmp_path / f"{scorer}.csv"
        assert main(["score", "--bundle", str(out), "--trajectory", str(traj), "--client", "0",
                     "--scorer", scorer, "--out", str(dest)]) == 0
        assert len(dest.read_text().splitlines()) == 31
    assert main(["score", "--bundle", str(out), "--trajectory", str(traj), "--client", "5",
                 "--out", str(tmp_path / "x.csv")]) == 2


def test_compare_and_report(tmp_path):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(CONFIG)
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(cfg), "--out", str(out), "--threads", "2"]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert {"mixed", "oracle", "selected:clues"} <= set(rep["arms"])
    assert rep["sweep"]
    tables = tmp_path / "tables"
    assert main(["report", str(out / "report.json"), "--out", str(tables)]) == 0
    assert (tables / "arms.csv").exists() and (tables / "sweep.csv").exists()


def test_merge_command(tmp_path):
    r = np.random.default_rng(0)
    params = make_params("mlp", (4, 3, 2), r)
    paths = []
    for i in range(2):
        ad = init_adapter(params, rank=2, seed=i)
        ad = ad.with_flat(r.normal(size=ad.flat().size))
        paths.append(save_adapter(tmp_path / f"a{i}.ckpt", ad))
    dest = tmp_path / "m.ckpt"
    assert main(["merge", *map(str, paths), "-o", str(dest), "--method", "task-arithmetic",
                 "--weights", "1,0"]) == 0
    assert load_adapter(dest).equals(load_adapter(paths[0]))
    prov = read_provenance(dest)
    assert prov["method"] == "task_arithmetic" and prov["weights"] == [1.0, 0.0]
    assert main(["merge", *map(str, paths), "-o", str(dest), "--method", "ties", "--density", "0.5"]) == 0


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[workflow]\nmode = 'gossip'\n")
    assert main(["run", "--config", str(bad)]) == 2
    assert "invalid configuration" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "none.toml")]) == 2
    assert main(["report", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 1
    assert main(["bogus"]) == 2
    assert main(["merge", str(tmp_path / "x"), "-o", str(tmp_path / "y")]) == 1
