import json
import math

import numpy as np
import pytest

from safe_fbsde.app import cli, runs
from safe_fbsde.app.config import ConfigError, NumericalError, RunConfig, load_config
from safe_fbsde.app.metrics import (METRIC_COLUMNS, MetricsRecord, MetricsWriter, constraint_counts, read_metrics,
                                    terminal_distance, violation_metrics)
from safe_fbsde.app.suite import failure_bound_experiment
from safe_fbsde.app.tasks import TASK_NAMES, make_task, running_cost, terminal_cost
from safe_fbsde.barriers import BarrierParams
from safe_fbsde.dynamics import NoiseModel

from oracles import failure_bound_reference, h_obstacle

SMALL = dict(batch=3, horizon_steps=4, iters=3, log_every=0)


# --- tasks ---------------------------------------------------------------------------

def test_costs_examples():
    task = make_task("swap", 4, w_p=1.0, w_v=0.0, W_p=10.0, W_v=0.0)
    assert running_cost(task, [0.0, 0.0, 0.0, 0.0], target_i=[0.0, 2.0]) == pytest.approx(4.0)
    assert running_cost(task, [1.0, 2.0, 0.3, 0.0], target_i=[1.0, 2.0]) == 0.0
    assert terminal_cost(task, [1.0, 0.0, 0.0, 0.0], target_i=[0.0, 0.0]) == pytest.approx(10.0)
    assert terminal_cost(task, [3.0, 1.0, 0.0, 0.0], target_i=[3.0, 1.0]) == 0.0


def test_swap_geometry():
    task = make_task("swap", 4)
    pos = task.start[:, :2]
    np.testing.assert_allclose(task.targets_final, -pos)
    ang = np.sort(np.mod(np.arctan2(pos[:, 1], pos[:, 0]), 2 * np.pi))
    np.testing.assert_allclose(np.diff(ang), np.pi / 2)


def test_bottleneck_phase_switch():
    task = make_task("bottleneck", 8, noise=NoiseModel(0.1, 0.1, 50))
    assert task.phase_step == 40
    np.testing.assert_array_equal(task.targets(39), task.targets_phase1)
    np.testing.assert_array_equal(task.targets(40), task.targets_final)
    # phase-1 targets sit on the x axis on either side of the gap
    assert np.all(task.targets_phase1[:, 1] == 0)
    assert set(np.sign(task.targets_phase1[:, 0])) == {1.0}
    s = np.zeros((8, 4))
    s[:, :2] = task.targets_phase1
    np.testing.assert_array_equal(task.running_cost(s, 39), 0.0)
    assert np.all(task.running_cost(s, 40) > 0)


def test_moving_obstacle_rises():
    task = make_task("moving_obstacle", 8)
    ys = [task.obstacles(t)[0, 1] for t in range(task.noise.horizon_steps + 1)]
    assert np.all(np.diff(ys) > 0)
    np.testing.assert_allclose(np.diff(ys, 2), 0, atol=1e-12)
    assert np.all([task.obstacles(t)[0, 0] == 0 for t in range(5)])


def test_formation_corners_zero_cost():
    task = make_task("formation", 4)
    s = np.zeros((4, 4))
    s[:, :2] = task.targets_final
    assert float(task.terminal_cost(s).sum()) == 0.0
    xs, ys = task.targets_final.T
    assert len(set(np.round(xs, 9))) == 2 and len(set(np.round(ys, 9))) == 2


def test_unknown_task_and_bad_geometry():
    with pytest.raises(ValueError):
        make_task("nope")
    with pytest.raises(ValueError):
        make_task("bottleneck", 5)
    with pytest.raises(ValueError):
        make_task("swap", 4, phase_fraction=1.5)
    assert set(TASK_NAMES) == {"swap", "swap_asym", "bottleneck", "moving_obstacle", "formation"}


# --- metrics -------------------------------------------------------------------

def test_violation_examples():
    params = BarrierParams()
    far = np.array([5.0, 5.0, 0.0, 0.0])
    traj = np.broadcast_to(far, (2, 4, 1, 4)).copy()
    assert violation_metrics(traj, [[0.0, 0.0]], [0.3], 0.2, params) == (0.0, 0.0)
    # outside the disc but driving straight at it
    close = np.array([-0.6, 0.0, 0.0, 1.0])
    assert h_obstacle(close, [0.0, 0.0], 0.5, params.mu_b) < 0
    traj[1, 2, 0] = close
    assert violation_metrics(traj, [[0.0, 0.0]], [0.3], 0.2, params) == (0.25, 0.0)


def test_metrics_record_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        MetricsRecord(0, 1.0, 1.5, 0.0, 0.0, 0.0)
    recs = [MetricsRecord(i, 0.1 * i + 1 / 3, 0.25, 0.0, math.pi, 12.5) for i in range(3)]
    with MetricsWriter(tmp_path / "m.csv") as mw:
        for r in recs:
            mw.write(r)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(METRIC_COLUMNS)
    assert read_metrics(tmp_path / "m.csv") == recs


def test_terminal_distance():
    s = np.zeros((2, 2, 4))
    s[..., 0] = [[3.0, 0.0], [0.0, 1.0]]
    assert terminal_distance(s, np.zeros(2)) == pytest.approx(1.0)


def test_constraint_counts_table():
    rows = constraint_counts(lambda N: make_task("swap", N, r=3), [4, 8, 16, 32])
    assert {r["per_agent_rows"] for r in rows} == {4}
    assert {r["per_agent_kkt"] for r in rows} == {12}
    assert [r["centralized_rows"] for r in rows] == [N * (N - 1) // 2 + N for N in (4, 8, 16, 32)]


def test_failure_experiment_small():
    rep = failure_bound_experiment(n_rollouts=400, seed=1)
    assert rep.bound == pytest.approx(failure_bound_reference(rep.B0, 0.0, 0.05, 40 * 0.05))
    assert rep.max_row_residual <= 1e-9
    assert 0.0 <= rep.p_hat <= rep.threshold


# --- config ----------------------------------------------------------------------

def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown task"):
        RunConfig(task="nope")
    with pytest.raises(ConfigError):
        RunConfig(batch=0)
    (tmp_path / "a.json").write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(tmp_path / "a.json")
    (tmp_path / "b.json").write_text('{"batchsize": 3}')
    with pytest.raises(ConfigError, match="batchsize"):
        load_config(tmp_path / "b.json")
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    with pytest.raises(ConfigError, match="solver"):
        RunConfig(solver={"bogus": 1}).solver_config()
    (tmp_path / "c.json").write_text('{"seed": 4, "batch": 7}')
    cfg = load_config(tmp_path / "c.json", seed=9)
    assert cfg.seed == 9 and cfg.batch == 7


# --- runs ---------------------------------------------------------------------------

def test_eval_on_fresh_model(tmp_path):
    cfg = RunConfig(**SMALL)
    s = runs.run_eval(cfg, tmp_path)
    for name in ("metrics.csv", "trajectories.json", "solver_trace.csv", "config.json"):
        assert (tmp_path / name).exists()
    (rec,) = read_metrics(tmp_path / "metrics.csv")
    assert 0 <= rec.frac_h_violation <= 1 and 0 <= rec.frac_hpos_violation <= 1
    doc = json.loads((tmp_path / "trajectories.json").read_text())
    assert len(doc["instances"]) == 3 and len(doc["instances"][0]) == 5 and len(doc["instances"][0][0]) == 4
    assert doc["instances"][0][-1][0][4:] == [None, None]
    assert len(doc["obstacles"]) == 5
    assert s["trace_iters"] > 0


def test_train_deterministic(tmp_path):
    cfg = RunConfig(**dict(SMALL, iters=50, batch=2, horizon_steps=3))
    runs.run_train(cfg, tmp_path / "a")
    runs.run_train(cfg, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert len(a.splitlines()) == 51
    assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()


def test_train_resume_and_eval_checkpoint(tmp_path):
    cfg = RunConfig(**SMALL)
    runs.run_train(cfg, tmp_path / "a")
    ck = tmp_path / "a" / "checkpoint.json"
    runs.run_train(cfg, tmp_path / "b", checkpoint=ck, max_iters=1)
    assert len(read_metrics(tmp_path / "b" / "metrics.csv")) == 1
    runs.run_eval(cfg, tmp_path / "c", checkpoint=ck)
    with pytest.raises(ConfigError):
        runs.run_eval(cfg, tmp_path / "d", checkpoint=tmp_path / "none.json")


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_rollout_is_numerical_error(tmp_path):
    cfg = RunConfig(**dict(SMALL, sigma=1e200, safe=False))
    with pytest.raises(NumericalError):
        runs.run_train(cfg, tmp_path)


# --- CLI -----------------------------------------------------------------------

def _write(tmp_path, **kw):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(dict(SMALL, **kw)))
    return str(p)


def test_cli_train_eval_with_plots(tmp_path, capsys):
    cfgp = _write(tmp_path)
    assert cli.main(["train", "--config", cfgp, "--out-dir", str(tmp_path / "t"), "--plots", "--max-iters", "2"]) == 0
    assert (tmp_path / "t" / "training.png").stat().st_size > 0
    assert json.loads(capsys.readouterr().out)["iters"] == 2
    assert cli.main(["eval", "--config", cfgp, "--out-dir", str(tmp_path / "e"), "--plots",
                     "--checkpoint", str(tmp_path / "t" / "checkpoint.json")]) == 0
    assert (tmp_path / "e" / "trajectories.png").exists() and (tmp_path / "e" / "solver_trace.png").exists()


def test_cli_bench_and_checks(tmp_path, capsys):
    cfgp = _write(tmp_path, solvecheck_instances=5, gradcheck_instances=3, bench_sizes=[4, 16])
    assert cli.main(["bench", "--config", cfgp, "--out-dir", str(tmp_path / "b"), "--plots"]) == 0
    rows = json.loads((tmp_path / "b" / "constraint_counts.json").read_text())
    assert rows[1]["centralized_rows"] == 136
    assert (tmp_path / "b" / "constraint_counts.png").exists()
    assert cli.main(["solve-check", "--config", cfgp, "--out-dir", str(tmp_path / "s")]) == 0
    assert json.loads((tmp_path / "s" / "solvecheck.json").read_text())["passed"]
    assert cli.main(["grad-check", "--config", cfgp, "--out-dir", str(tmp_path / "g")]) == 0
    capsys.readouterr()


@pytest.mark.filterwarnings("ignore:overflow")
def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "missing.json"), "--out-dir", str(tmp_path / "x")]) == 1
    assert cli.main(["train", "--config", _write(tmp_path, batch=0), "--out-dir", str(tmp_path / "x")]) == 1
    assert cli.main(["eval", "--config", _write(tmp_path), "--checkpoint", str(tmp_path / "nope.json"),
                     "--out-dir", str(tmp_path / "x")]) == 1
    assert cli.main(["train", "--config", _write(tmp_path, sigma=1e200), "--out-dir", str(tmp_path / "y")]) == 2
    err = capsys.readouterr().err
    assert "numerical failure" in err and "error:" in err
    with pytest.raises(SystemExit):
        cli.main(["fly"])


def test_plotting_smoke(tmp_path):
    from safe_fbsde.app import plotting

    with MetricsWriter(tmp_path / "metrics.csv") as mw:
        for i in range(25):
            mw.write(MetricsRecord(i, 10.0 / (i + 1), 0.0, 0.0, 1.0 / (i + 1), 5.0))
    (out,) = plotting.render_train(tmp_path)
    assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
