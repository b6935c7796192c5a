import json
import subprocess
import sys

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st

from fsqp_mpcc import harness as H
from fsqp_mpcc.cli import main
from fsqp_mpcc.config import Config, ExperimentSpec, data_path, load_config, load_spec
from fsqp_mpcc.fsqp import Mode
from fsqp_mpcc.mpc import solve_instance


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 50), st.floats(0.0, 0.1))
def test_noise_is_bounded_and_prefix_stable(seed, n, a):
    w = H.noise_sequence(seed, n, a)
    assert w.shape == (n, 2)
    assert np.all(np.abs(w) <= a)
    np.testing.assert_array_equal(H.noise_sequence(seed, n + 7, a)[:n], w)


def test_noise_depends_on_seed():
    assert not np.array_equal(H.noise_sequence(1, 10, 0.01), H.noise_sequence(2, 10, 0.01))


def test_same_seed_same_run(setup):
    a, _ = H.run_closed_loop(setup, steps=12, noise=0.04, seed=3)
    b, _ = H.run_closed_loop(setup, steps=12, noise=0.04, seed=3)
    for ra, rb in zip(a.steps, b.steps):
        np.testing.assert_array_equal(ra.state, rb.state)
        np.testing.assert_array_equal(ra.applied, rb.applied)
        assert (ra.status, ra.inner, ra.objective, ra.cv) == (rb.status, rb.inner, rb.objective, rb.cv)


def test_export_consistency(short_run, setup, tmp_path):
    run, _ = short_run
    H.export_run(run, tmp_path, plots=False)
    rows = H.read_csv(tmp_path / "steps.csv")
    assert len(rows) == len(run.steps) == 60
    summary = json.loads((tmp_path / "summary.json").read_text())
    ok = sum(r["status"] != "failed" for r in rows)
    assert summary["convergence_pct"] == pytest.approx(100.0 * ok / len(rows), abs=1e-12)
    wall = [float(r["wall_time"]) for r in rows if r["status"] != "failed"]
    assert summary["mean_runtime"] == pytest.approx(float(np.mean(wall)), rel=1e-12)
    assert (tmp_path / "steps.csv").read_text().startswith("# format: fsqp-mpcc-steps/1")
    traj = H.read_csv(tmp_path / "trajectory.csv")
    assert list(traj[0]) == ["t", "x", "y", "v_f"]


def test_empty_run_exports_headers_only(tmp_path):
    run = H.RunRecord(Mode.FSQP)
    paths = H.export_run(run, tmp_path, plots=True)
    assert H.read_csv(tmp_path / "steps.csv") == []
    head = (tmp_path / "steps.csv").read_text().splitlines()
    assert head[1].split(",") == list(H.STEP_COLUMNS)
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["steps"] == 0 and s["convergence_pct"] == 0.0
    assert all(p.exists() for p in paths)
    table = H.ReplayTable(np.zeros(0, dtype=int), {"fsqp": {k: np.zeros(0) for k in H.REPLAY_FIELDS}})
    H.export_replay(table, tmp_path / "replay")
    assert H.read_csv(tmp_path / "replay" / "replay.csv") == []


def test_run_record_roundtrip(short_run, tmp_path):
    run, _ = short_run
    H.save_run(run, tmp_path)
    back = H.load_run(tmp_path)
    assert back.summary() == run.summary()
    np.testing.assert_array_equal(back.steps[7].state, run.steps[7].state)


def test_instances_replay_fidelity(short_run, setup, tmp_path):
    run, _ = short_run
    path = H.save_instances(tmp_path / "instances.npz", run, setup)
    log = H.load_instances(path)
    assert len(log) == len(run.steps)
    for k in (0, 17, 59):
        inst = log.instances[k]
        nlp = H.build_nlp(log.config.ocp, log.spline, log.config.params, inst.x_tilde, inst.theta_hats, inst.x_f)
        res = solve_instance(nlp, inst, log.config.solver)
        assert res.status.value == log.status[k]
        np.testing.assert_allclose(res.iterate.y, log.y[k], rtol=0, atol=1e-10)


def test_replay_ratios_recomputable(short_run, setup, tmp_path):
    run, _ = short_run
    H.save_instances(tmp_path / "instances.npz", run, setup)
    log = H.load_instances(tmp_path)
    table = H.replay(log, ["fsqp", "rti"], range(10))
    H.export_replay(table, tmp_path / "rep", plots=False)
    rows = H.read_csv(tmp_path / "rep" / "replay.csv")
    ok = [r for r in rows if r["fsqp_status"] != "failed"]
    num = np.mean([float(r["fsqp_cost"]) for r in ok])
    den = np.mean([float(r["rti_cost"]) for r in ok])
    summary = json.loads((tmp_path / "rep" / "replay_summary.json").read_text())
    assert abs(summary["ratios"]["fsqp_rti_cost"] - num / den) <= 1e-12
    assert summary["modes"]["rti"]["max_cv"] > summary["modes"]["fsqp"]["max_cv"]


def test_lap_steps():
    from fsqp_mpcc.mpc import StepRecord
    run = H.RunRecord(Mode.FSQP, track_length=1.0)
    for t, th in enumerate(np.linspace(0.0, 2.5, 11)):
        state = np.zeros(9)
        state[8] = th
        run.steps.append(StepRecord(t, state, np.zeros(3), "converged", 1, 1, 0.0, 0.0, 0.0, "solved"))
    # progress 0.25 per step: laps complete at steps 4 and 8
    assert run.lap_steps() == [4, 4]


# -- configuration -------------------------------------------------------------------

def test_default_config_file():
    cfg = load_config(data_path("default.yaml"))
    assert cfg.ocp.N == 40 and cfg.M_max == 5 and cfg.terminal.T == 180
    assert Config.from_dict(cfg.to_dict()) == cfg


def test_config_errors(tmp_path):
    p = tmp_path / "c.yaml"
    for text, match in (("solver: {eps_tol: -1}\n", "tolerances"), ("ocp: {horizon: 3}\n", "unknown"),
                        ("weights: {}\n", "sections"), ("controller: {M_max: -2}\n", "M_max"),
                        ("- 1\n- 2\n", "mapping")):
        p.write_text(text)
        with pytest.raises(ValueError, match=match):
            load_config(p)
    with pytest.raises(ValueError):
        load_config(tmp_path / "missing.yaml")


def test_spec_resolution(tmp_path):
    spec = load_spec(data_path("presets/sm8.yaml"))
    assert spec.noise == 0.08 and spec.laps == 10 and spec.modes == (Mode.FSQP,)
    assert spec.track.exists() and spec.config.exists() and spec.terminal.exists()
    with pytest.raises(ValueError):
        ExperimentSpec(spec.track, spec.config, spec.terminal, laps=0)
    with pytest.raises(ValueError):
        ExperimentSpec(spec.track, spec.config, spec.terminal, noise=-0.1)
    p = tmp_path / "s.yaml"
    p.write_text("track: a\nconfig: b\n")
    with pytest.raises(ValueError, match="missing"):
        load_spec(p)


# -- command line ---------------------------------------------------------------------

def write_spec(tmp_path, **over):
    data = yaml.safe_load(data_path("presets/sm2.yaml").read_text())
    base = data_path("presets")
    for k in ("track", "config", "terminal"):
        data[k] = str((base / data[k]).resolve())
    data.update(over)
    p = tmp_path / "spec.yaml"
    p.write_text(yaml.safe_dump(data))
    return p


def test_cli_simulate_replay_export(tmp_path, capsys):
    spec = write_spec(tmp_path, out=str(tmp_path / "run"))
    assert main(["simulate", "--spec", str(spec), "--steps", "6", "--mode", "fsqp,rti", "--trace"]) == 0
    err = capsys.readouterr().err
    assert err.count("t=") == 12
    d = tmp_path / "run" / "fsqp"
    for name in ("steps.csv", "summary.json", "trajectory.csv", "instances.npz", "records.npz", "trajectory.png"):
        assert (d / name).exists()
    assert main(["replay", "--instances", str(d), "--modes", "fsqp,rti", "--limit", "3", "--no-plots"]) == 0
    assert len(H.read_csv(d / "replay" / "replay.csv")) == 3
    (d / "summary.json").unlink()
    assert main(["export", "--run", str(d), "--format", "json"]) == 0
    assert (d / "summary.json").exists()


def test_cli_exit_codes(tmp_path):
    assert main(["simulate", "--spec", str(tmp_path / "nope.yaml")]) == 1
    cfg = yaml.safe_load(data_path("default.yaml").read_text())
    cfg["solver"]["inner_max"] = 1
    cfg["controller"]["M_max"] = 0
    (tmp_path / "strict.yaml").write_text(yaml.safe_dump(cfg))
    spec = write_spec(tmp_path, config=str(tmp_path / "strict.yaml"), out=str(tmp_path / "o"))
    assert main(["simulate", "--spec", str(spec), "--steps", "3", "--no-plots"]) == 3
    with pytest.raises(SystemExit):
        main(["replay", "--instances", "x", "--modes", "ipopt"])


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "fsqp_mpcc.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("terminal", "simulate", "replay", "export", "trials"):
        assert cmd in out.stdout
