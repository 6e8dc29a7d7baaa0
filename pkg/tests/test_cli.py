import json

import pytest

from bmclab.cli import main
from bmclab.rng import derived_seed


def write(tmp_path, raw, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return p


SMALL = {
    "state_space": {"type": "tree", "degree": 3},
    "branching": {"offspring": {"kind": "geometric", "q": 0.5}},
    "experiment": {"horizon": 5, "trajectories": 20},
}
GW = {
    "state_space": {"type": "explicit", "states": ["o"], "matrix": [[1.0]]},
    "branching": {"offspring": {"kind": "geometric", "q": 0.5}},
    "experiment": {"horizon": 6, "trajectories": 400},
}


def files(d):
    return sorted(p.relative_to(d).as_posix() for p in d.rglob("*") if p.is_file())


def test_check_passes(tmp_path, capsys):
    assert main(["check", "--out", str(tmp_path / "o")]) == 0
    assert "invariant suite: 15/15 exact identities passed" in capsys.readouterr().out
    assert files(tmp_path / "o") == ["check.json"]


def test_config_error_exits_2_and_writes_nothing(tmp_path, capsys):
    raw = json.loads(json.dumps(SMALL))
    del raw["branching"]["offspring"]
    out = tmp_path / "o"
    assert main(["martingale", "--config", str(write(tmp_path, raw)), "--out", str(out)]) == 2
    assert "branching.offspring" in capsys.readouterr().err
    assert not out.exists()


def test_precondition_error_exits_2(tmp_path):
    raw = dict(SMALL, experiment={"horizon": 5, "trajectories": 20, "s_grid": [5.0]})
    out = tmp_path / "o"
    assert main(["inequalities", "--config", str(write(tmp_path, raw)), "--out", str(out)]) == 2
    assert not out.exists()
    assert main(["gw", "--config", str(write(tmp_path, SMALL)), "--out", str(out)]) == 2


def test_same_seed_same_bytes(tmp_path):
    cfgp = write(tmp_path, GW)
    for d in ("a", "b"):
        assert main(["gw", "--config", str(cfgp), "--seed", "7", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "gw.json").read_bytes() == (tmp_path / "b" / "gw.json").read_bytes()
    assert main(["gw", "--config", str(cfgp), "--seed", "8", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "gw.json").read_bytes() != (tmp_path / "c" / "gw.json").read_bytes()


def test_csv_outputs_and_simulate_trajectories(tmp_path):
    raw = dict(SMALL, experiment={"horizon": 4, "trajectories": 5, "watched": ["-"]})
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(write(tmp_path, raw)), "--format", "csv", "--out", str(out)]) == 0
    assert files(out) == ["simulate_config.json", "simulate_per_n.csv", "simulate_trajectories.csv", "simulate_verdicts.csv"]
    lines = (out / "simulate_trajectories.csv").read_text().splitlines()
    assert lines[0].endswith(",-") and len(lines) == 1 + 5 * 5


def test_failed_verdict_exits_3_with_marker(tmp_path):
    raw = dict(SMALL, experiment={"horizon": 6, "trajectories": 20, "cap": 4, "max_truncated_fraction": 0.0})
    out = tmp_path / "o"
    assert main(["martingale", "--config", str(write(tmp_path, raw)), "--out", str(out)]) == 3
    assert "truncated_fraction" in (out / "martingale.FAILED").read_text()
    assert (out / "martingale.json").exists()


def test_sweep_writes_run_dirs(tmp_path):
    raw = dict(SMALL, experiment={"horizon": [3, 4], "trajectories": 10})
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(write(tmp_path, raw)), "--seed", "2", "--out", str(out)]) == 0
    idx = json.loads((out / "sweep.json").read_text())["runs"]
    assert [r["dir"] for r in idx] == ["run_000", "run_001"]
    assert [r["seed"] for r in idx] == [derived_seed(2, 0), derived_seed(2, 1)]
    assert json.loads((out / "run_001" / "simulate.json").read_text())["horizon"] == 4


@pytest.mark.parametrize("fmt,name", [("json", "boundary_table.json"), ("csv", "boundary_table.csv")])
def test_boundary_table(tmp_path, configs, fmt, name):
    out = tmp_path / "o"
    args = ["boundary-table", "--config", str(configs / "boundary_table.json"), "--depth", "2", "--format", fmt, "--out", str(out)]
    assert main(args + ["--normalized"]) == 0
    assert files(out) == [name]


def test_nothing_written_outside_out(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfgp = write(tmp_path, GW)
    before = set(files(tmp_path))
    assert main(["gw", "--config", str(cfgp), "--out", "results"]) == 0
    after = set(files(tmp_path))
    assert {p for p in after - before if not p.startswith("results/")} == set()


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as ei:
        main(["frobnicate"])
    assert ei.value.code == 2
