import csv
import json

import numpy as np
import pytest

from crpndrm.cli import load_config, main
from crpndrm.envs import cliff_walk_env
from crpndrm.experiments import emit_policy_map, run_suite, summarize_returns

TINY = 'n_iter = 3\nbatch_m = 20\neval_episodes = 25\n'


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return str(path)


def read_all(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_cliff_suite_reruns_are_byte_identical(tmp_path, tiny_config):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["run", "--suite", "cliffwalk_table3", "--reps", "2", "--seed", "3",
                     "--out", str(out), "--config", tiny_config]) == 0
    files = read_all(a)
    assert files == read_all(b)
    for name in ("learning_curve.csv", "eval_returns.csv", "policy_final.json", "summary.json", "summary.csv",
                 "policy_map_DRMACRPN.json"):
        assert name in files
    assert "wall_time" not in files["learning_curve.csv"].decode()


def test_summary_recomputes_from_eval_returns(tmp_path, tiny_config):
    rep = run_suite("cliffwalk_table3", reps=2, seed=0, out=str(tmp_path), overrides=load_config(tiny_config))
    assert rep.passed and rep.exit_code == 0
    with open(tmp_path / "eval_returns.csv") as fh:
        rows = list(csv.DictReader(fh))
    ret = [float(r["return"]) for r in rows if r["algorithm"] == "ACRPN"]
    assert len(ret) == 50
    s = json.loads((tmp_path / "summary.json").read_text())["algorithms"]["ACRPN"]
    assert s["mean"] == pytest.approx(np.mean(ret)) and s["max"] == max(ret)


def test_cartpole_suite_reports_paired_wins(tmp_path):
    cfg = tmp_path / "cp.toml"
    cfg.write_text('n_iter = 2\nbatch_m = 10\neval_episodes = 5\nenv_kwargs = { horizon = 40 }\n')
    rep = run_suite("cartpole_compare", reps=2, seed=0, out=str(tmp_path / "o"), overrides=load_config(str(cfg)))
    wins = rep.summary["paired_wins_vs_ACRPN"]
    assert set(wins) == {"DRMACRPN-gini", "DRMACRPN-dual_power"}
    assert all(0 <= v <= 2 for v in wins.values())


def test_policy_map_probabilities():
    env = cliff_walk_env()
    theta = np.zeros((48, 4))
    theta[:, 1] = np.log(3.0)
    pm = emit_policy_map([theta.ravel(), np.zeros(192)], env)
    cells = np.array(pm["cells"])
    assert cells.shape == (48, 4)
    np.testing.assert_allclose(cells.sum(axis=1), 1.0)
    np.testing.assert_allclose(cells[0], [(0.25 + 1 / 6) / 2, (0.25 + 0.5) / 2, (0.25 + 1 / 6) / 2, (0.25 + 1 / 6) / 2])
    with pytest.raises(ValueError):
        emit_policy_map([np.zeros(5)], env)


def test_summarize_returns():
    s = summarize_returns([-16, -12, -123])
    assert (s["min"], s["max"], s["n"]) == (-123.0, -12.0, 3)


def test_constants_prints_schedule(capsys):
    assert main(["constants", "--eps", "0.1", "--env", "cliff_walk"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["d"] == 192 and out["schedule"]["N"] >= 1
    assert out["constants"]["L_H"] > 0


def test_constants_unit_check(capsys):
    assert main(["constants", "--eps", "1e9", "--env", "saddle"]) == 2
    assert main(["constants", "--eps", "1e9", "--env", "saddle", "--allow-inadmissible"]) == 0
    capsys.readouterr()


@pytest.mark.parametrize("argv", [
    ["run", "--suite", "nope"],
    ["run", "--suite", "cliffwalk_table3", "--reps", "0"],
    ["constants", "--eps", "0.1", "--env", "cart_pole"],
    ["constants", "--eps", "0.1", "--env", "cliff_walk", "--distortion", "cvar:0.5"],
    ["frobnicate"],
])
def test_config_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    capsys.readouterr()


def test_bad_config_files_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("wobble = 3\n")
    assert main(["run", "--suite", "cliffwalk_table3", "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text("alpha = -1\n")
    assert main(["run", "--suite", "cliffwalk_table3", "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text("alpha = \n")
    assert main(["run", "--suite", "cliffwalk_table3", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["run", "--suite", "cliffwalk_table3", "--config", str(tmp_path / "missing.toml")]) == 2
    capsys.readouterr()


def test_non_finite_run_exits_1_and_checkpoints(tmp_path, monkeypatch, capsys):
    import crpndrm.experiments as ex
    from crpndrm.solver import NonFiniteError

    def boom(cfg, theta0=None, callback=None):
        raise NonFiniteError("non-finite parameters at iteration 0", np.zeros(192), 0)

    monkeypatch.setattr(ex, "optimize", boom)
    assert main(["run", "--suite", "cliffwalk_table3", "--reps", "1", "--out", str(tmp_path)]) == 1
    assert (tmp_path / "checkpoint_REINFORCE_rep0.json").exists()
    capsys.readouterr()


def test_schedule_check_suite(tmp_path):
    rep = run_suite("saddle_escape", reps=1, seed=0, out=str(tmp_path), overrides={"seeds": 2})
    assert (tmp_path / "saddle_report.json").exists()
    assert rep.checks[0].name == "saddle escape"
