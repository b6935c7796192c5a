"""Closed-loop experiments, instance replay and result files.

Noise uses numpy's PCG64 seeded through ``SeedSequence(seed)``.  The
per-step disturbance stream is the first child of that sequence and step
``k`` consumes exactly two doubles, so a seed fixes the disturbances
independently of the solver mode or of how far the run gets.  The second
child feeds the randomized feasibility trials.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .config import Config, ExperimentSpec, load_config
from .fsqp import Mode, Status, constraint_violation
from .mpc import Candidate, Controller, ControllerAbort, Instance, StepRecord, solve_instance
from .ocp import build_nlp
from .terminal import TerminalSet, load_terminal_set
from .track import Centerline, TrackSpline, fit_spline, load_track, track_constraint
from .vehicle import PX, PY, THETA, VF, discrete_step

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
STEP_COLUMNS = ("t", "p_x", "p_y", "gamma", "v_f", "v_l", "omega", "tau", "delta", "theta",
                "d_tau", "d_delta", "d_theta", "status", "outer", "inner", "wall_time", "objective",
                "cv", "shift_cv", "provenance")
REPLAY_FIELDS = ("status", "cost", "wall_time", "cv")


# -- setup -------------------------------------------------------------------------

@dataclass
class Setup:
    config: Config
    centerline: Centerline
    spline: TrackSpline
    terminal: TerminalSet

    @classmethod
    def from_spec(cls, spec: ExperimentSpec) -> "Setup":
        config = load_config(spec.config)
        centerline = load_track(spec.track)
        try:
            terminal = load_terminal_set(spec.terminal, config.params)
        except OSError as exc:
            raise ValueError(f"{spec.terminal}: {exc.strerror}") from None
        return cls(config, centerline, fit_spline(centerline), terminal)

    def controller(self, mode: Mode = Mode.FSQP, M_max: Optional[int] = None) -> Controller:
        settings = self.config.solver
        if settings.mode is not Mode(mode):
            settings = replace(settings, mode=Mode(mode))
        return Controller(self.config.ocp, self.spline, self.config.params, self.terminal, settings,
                          self.config.M_max if M_max is None else M_max)


def noise_sequence(seed: int, steps: int, a: float) -> np.ndarray:
    """``(steps, 2)`` uniform displacements in ``[-a, a]``."""
    child = np.random.SeedSequence(seed).spawn(2)[0]
    rng = np.random.Generator(np.random.PCG64(child))
    return a * rng.uniform(-1.0, 1.0, size=(steps, 2))


def trial_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed).spawn(2)[1]))


# -- records -----------------------------------------------------------------------

@dataclass
class RunRecord:
    mode: Mode
    steps: list[StepRecord] = field(default_factory=list)
    aborted: bool = False
    message: str = ""
    track_length: float = 0.0
    spec: dict = field(default_factory=dict)

    @property
    def converged(self) -> np.ndarray:
        return np.array([r.status != Status.FAILED.value for r in self.steps], dtype=bool)

    @property
    def convergence(self) -> float:
        """Percentage of steps where the solver did not fail."""
        return 100.0 * float(self.converged.mean()) if self.steps else 0.0

    def lap_steps(self) -> list[int]:
        """Steps taken per completed lap, from the unwrapped progress."""
        if not self.steps or self.track_length <= 0:
            return []
        theta = np.array([r.state[THETA] for r in self.steps])
        laps = np.floor((theta - theta[0]) / self.track_length).astype(int)
        marks = [0] + [int(np.argmax(laps >= k)) for k in range(1, int(laps.max()) + 1)]
        return list(np.diff(marks).tolist())

    def summary(self) -> dict:
        ok = self.converged
        wall = np.array([r.wall_time for r in self.steps])
        obj = np.array([r.objective for r in self.steps])
        cv = np.array([r.cv for r in self.steps])
        return {
            "format": "fsqp-mpcc-summary",
            "version": FORMAT_VERSION,
            "mode": self.mode.value,
            "steps": len(self.steps),
            "aborted": self.aborted,
            "message": self.message,
            "lap_steps": self.lap_steps(),
            "converged": int(ok.sum()),
            "convergence_pct": self.convergence,
            "fallbacks": int(sum(r.provenance != "solved" for r in self.steps)),
            "mean_runtime": float(wall[ok].mean()) if ok.any() else None,
            "max_runtime": float(wall[ok].max()) if ok.any() else None,
            "mean_cost": float(obj.mean()) if len(obj) else None,
            "max_cv": float(cv.max()) if len(cv) else None,
            "spec": self.spec,
        }


# -- closed loop -----------------------------------------------------------------------

def warm_up(controller: Controller) -> None:
    """Trigger JIT compilation so the first timed step is representative."""
    cand = controller.initial_candidate()
    inst = controller.instance(cand.xs[0], 0, cand)
    nlp = controller.problem(inst.x_tilde, 0, inst.theta_hats)
    solve_instance(nlp, inst, controller.settings)


def run_closed_loop(setup: Setup, mode: Mode = Mode.FSQP, *, laps: int = 10, noise: float = 0.0,
                    seed: int = 0, steps: Optional[int] = None, fail_steps: Iterable[int] = (),
                    M_max: Optional[int] = None, trace: Optional[Callable[[StepRecord], None]] = None,
                    keep_candidates: bool = False) -> tuple[RunRecord, list]:
    """Simulate ``laps * T`` steps (or ``steps``) of the disturbed plant.

    Returns the run record and, with ``keep_candidates``, the adopted plan at
    each step (otherwise an empty list).  A controller abort ends the run
    early with ``aborted`` set.
    """
    mode = Mode(mode)
    n = int(steps) if steps is not None else laps * setup.terminal.T
    ctl = setup.controller(mode, M_max)
    warm_up(ctl)
    ctl.previous = None
    w = noise_sequence(seed, n, noise)
    fail = set(fail_steps)
    run = RunRecord(mode, track_length=setup.spline.length,
                    spec={"laps": laps, "noise": noise, "seed": seed, "steps": n})
    cands = []
    x = setup.terminal.state(0).copy()
    for t in range(n):
        try:
            u, cand, rec = ctl.control_step(x, t, fail=t in fail)
        except ControllerAbort as exc:
            run.aborted = True
            run.message = str(exc)
            log.warning("%s", exc)
            break
        run.steps.append(rec)
        if keep_candidates:
            cands.append(cand.copy())
        if trace is not None:
            trace(rec)
        x = discrete_step(x, u, w[t], setup.config.params, setup.config.ocp.dt)
    return run, cands


def trace_line(rec: StepRecord) -> str:
    return (f"t={rec.t:5d} {rec.status:20s} outer={rec.outer} inner={rec.inner:3d} "
            f"{1e3 * rec.wall_time:7.2f} ms cv={rec.cv:.2e} {rec.provenance}")


# -- instance logs --------------------------------------------------------------------------

def save_instances(path, run: RunRecord, setup: Setup) -> Path:
    """Persist every logged OCP instance with the adopted solution."""
    path = Path(path)
    recs = [r for r in run.steps if r.instance is not None]
    active = [np.asarray(r.instance.active, dtype=np.int64) for r in recs]
    offsets = np.cumsum([0] + [len(a) for a in active])
    meta = {"format": "fsqp-mpcc-instances", "version": FORMAT_VERSION, "mode": run.mode.value,
            "config": setup.config.to_dict(), "width": setup.centerline.width,
            "orientation": setup.centerline.orientation}

    def stack(get, width):
        return np.array([get(r) for r in recs]) if recs else np.zeros((0, width))

    ny = len(recs[0].y) if recs else 0
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        meta=np.array(json.dumps(meta)),
        centerline=setup.centerline.waypoints,
        t=np.array([r.t for r in recs], dtype=np.int64),
        x_tilde=stack(lambda r: r.instance.x_tilde, 9),
        theta_hats=stack(lambda r: r.instance.theta_hats, 0),
        x_f=stack(lambda r: r.instance.x_f, 9),
        y0=stack(lambda r: r.instance.y0, ny),
        lam0=stack(lambda r: r.instance.lam0, 0),
        mu0=stack(lambda r: r.instance.mu0, 0),
        active=np.concatenate(active) if active else np.zeros(0, dtype=np.int64),
        active_offsets=offsets,
        y=stack(lambda r: r.y, ny),
        status=np.array([r.status for r in recs]),
        objective=np.array([r.objective for r in recs]),
        wall_time=np.array([r.wall_time for r in recs]),
        cv=np.array([r.cv for r in recs]),
    )
    return path


@dataclass
class InstanceLog:
    config: Config
    centerline: Centerline
    instances: list[Instance]
    y: np.ndarray
    status: np.ndarray
    objective: np.ndarray
    wall_time: np.ndarray
    mode: Mode

    @property
    def spline(self) -> TrackSpline:
        return fit_spline(self.centerline)

    def __len__(self) -> int:
        return len(self.instances)


def load_instances(path) -> InstanceLog:
    path = Path(path)
    if path.is_dir():
        path = path / "instances.npz"
    try:
        with np.load(path, allow_pickle=False) as npz:
            # NpzFile decompresses on every lookup, so read each array once
            data = {k: npz[k] for k in npz.files}
    except (OSError, KeyError) as exc:
        raise ValueError(f"{path}: {exc}") from None
    meta = json.loads(str(data["meta"]))
    if meta.get("format") != "fsqp-mpcc-instances" or meta.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: not a version {FORMAT_VERSION} instance log")
    offs = data["active_offsets"]
    act = data["active"]
    insts = [
        Instance(int(data["t"][k]), data["x_tilde"][k], data["theta_hats"][k], data["x_f"][k],
                 data["y0"][k], data["lam0"][k], data["mu0"][k],
                 tuple(int(i) for i in act[offs[k]: offs[k + 1]]))
        for k in range(len(data["t"]))
    ]
    return InstanceLog(Config.from_dict(meta["config"]),
                       Centerline(data["centerline"], meta["width"], meta["orientation"]),
                       insts, data["y"], data["status"], data["objective"], data["wall_time"],
                       Mode(meta["mode"]))


# -- replay --------------------------------------------------------------------------------------

@dataclass
class ReplayTable:
    """Per-instance results, one column group per mode."""

    t: np.ndarray
    results: dict[str, dict[str, np.ndarray]]

    def ok(self, mode: str) -> np.ndarray:
        return self.results[mode]["status"] != Status.FAILED.value

    def ratio(self, num: str, den: str, key: str) -> Optional[float]:
        """Ratio of means of ``key`` over instances where FSQP did not fail."""
        mask = self.ok("fsqp") if "fsqp" in self.results else np.ones(len(self.t), dtype=bool)
        if not mask.any():
            return None
        a = self.results[num][key][mask].astype(float)
        b = self.results[den][key][mask].astype(float)
        return float(a.mean() / b.mean())

    def summary(self) -> dict:
        out = {"format": "fsqp-mpcc-replay-summary", "version": FORMAT_VERSION,
               "instances": int(len(self.t)), "modes": {}}
        for m, res in self.results.items():
            ok = self.ok(m)
            cv = res["cv"].astype(float)
            out["modes"][m] = {
                "converged": int(ok.sum()),
                "convergence_pct": 100.0 * float(ok.mean()) if len(ok) else 0.0,
                "mean_runtime": float(res["wall_time"].mean()) if len(ok) else None,
                "mean_cost": float(res["cost"].mean()) if len(ok) else None,
                "max_cv": float(cv.max()) if len(cv) else None,
                "max_cv_ok": float(cv[ok].max()) if ok.any() else None,
                "cv_quantiles": (dict(zip(("p50", "p90", "p99", "max"),
                                          np.quantile(cv, [0.5, 0.9, 0.99, 1.0]).tolist()))
                                 if len(cv) else {}),
            }
        ratios = {}
        if "fsqp" in self.results and "rti" in self.results:
            ratios["fsqp_rti_cost"] = self.ratio("fsqp", "rti", "cost")
            ratios["fsqp_rti_runtime"] = self.ratio("fsqp", "rti", "wall_time")
        if "fsqp" in self.results and "full" in self.results:
            ratios["full_fsqp_runtime"] = self.ratio("full", "fsqp", "wall_time")
            ratios["fsqp_full_cost"] = self.ratio("fsqp", "full", "cost")
        out["ratios"] = ratios
        return out


def replay(log_: InstanceLog, modes: Sequence, indices: Optional[Sequence[int]] = None,
           settings=None) -> ReplayTable:
    """Solve logged instances under each mode with the logged warm starts.

    Instances are solved sequentially: the wall-time ratios are the
    measured quantity and concurrent workers would distort them.
    """
    cfg = log_.config
    spline = log_.spline
    base = cfg.solver if settings is None else settings
    idx = list(range(len(log_))) if indices is None else list(indices)
    modes = [Mode(m) for m in modes]
    results: dict[str, dict[str, list]] = {m.value: {k: [] for k in REPLAY_FIELDS} for m in modes}
    if idx:
        inst = log_.instances[idx[0]]
        nlp = build_nlp(cfg.ocp, spline, cfg.params, inst.x_tilde, inst.theta_hats, inst.x_f)
        for m in modes:
            solve_instance(nlp, inst, replace(base, mode=m))
    for k in idx:
        inst = log_.instances[k]
        nlp = build_nlp(cfg.ocp, spline, cfg.params, inst.x_tilde, inst.theta_hats, inst.x_f)
        for m in modes:
            res = solve_instance(nlp, inst, replace(base, mode=m))
            g, h = nlp.constraints(res.iterate.y)
            row = results[m.value]
            row["status"].append(res.status.value)
            row["cost"].append(nlp.objective(res.iterate.y))
            row["wall_time"].append(res.wall_time)
            row["cv"].append(constraint_violation(g, h))
    t = np.array([log_.instances[k].t for k in idx], dtype=np.int64)
    return ReplayTable(t, {m: {k: np.array(v) for k, v in cols.items()} for m, cols in results.items()})


# -- open-loop trials after forced failures ------------------------------------------------------

@dataclass
class TrialResult:
    M: int
    delta: float
    feasible: np.ndarray
    cv: np.ndarray
    starts: np.ndarray

    @property
    def rate(self) -> float:
        return float(self.feasible.mean()) if len(self.feasible) else 0.0


def open_loop_trials(setup: Setup, states: np.ndarray, cands: list[Candidate], M: int, delta: float,
                     trials: int, rng: np.random.Generator, cv_tol: float = 1e-6) -> TrialResult:
    """Apply the stored plan open loop for ``M`` disturbed steps, then solve.

    Each trial picks a step ``t0`` of a nominal run, forces ``M`` solver
    failures from there (so the shifted plan is applied) under uniform
    displacement noise of half-width ``delta``, and checks that the
    problem at ``t0 + M`` is solved by the run-to-convergence solver with
    CV at most ``cv_tol``.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    ctl = setup.controller(Mode.FULL, M_max=M)
    params, dt = setup.config.params, setup.config.ocp.dt
    hi = len(cands) - M - 1
    if hi < 1:
        raise ValueError("nominal run too short for these trials")
    starts = rng.integers(1, hi, size=trials)
    feas, cvs = [], []
    for t0 in starts:
        ctl.previous = cands[t0 - 1].copy()
        x = states[t0].copy()
        for k in range(M):
            u, _, _ = ctl.control_step(x, t0 + k, fail=True)
            x = discrete_step(x, u, delta * rng.uniform(-1.0, 1.0, 2), params, dt)
        _, _, rec = ctl.control_step(x, t0 + M)
        feas.append(rec.status == Status.CONVERGED.value and rec.cv <= cv_tol)
        cvs.append(rec.cv)
    return TrialResult(M, delta, np.array(feas), np.array(cvs), starts)


def calibrate_delta(setup: Setup, states, cands, M: int, rng: np.random.Generator,
                    candidates: Sequence[float] = (0.04, 0.02, 0.01, 0.005, 0.0025), trials: int = 20):
    """Largest tried disturbance bound with all trials feasible, or ``None``."""
    for delta in sorted(candidates, reverse=True):
        if open_loop_trials(setup, states, cands, M, delta, trials, rng).feasible.all():
            return delta
    return None


# -- export ----------------------------------------------------------------------------------

def _write_csv(path: Path, kind: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            fh.write(f"# format: fsqp-mpcc-{kind}/{FORMAT_VERSION}\n")
            wr = csv.writer(fh)
            wr.writerow(header)
            for row in rows:
                wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from None
    return path


def read_csv(path) -> list[dict[str, str]]:
    """Read a CSV written by this module, skipping the version line."""
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _write_json(path: Path, data: dict) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            json.dump(data, fh, indent=2)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from None
    return path


def step_rows(run: RunRecord):
    for r in run.steps:
        yield ([r.t, *map(float, r.state), *map(float, r.applied), r.status, r.outer, r.inner,
                float(r.wall_time), float(r.objective), float(r.cv), float(r.shift_cv), r.provenance])


def save_run(run: RunRecord, directory) -> Path:
    """Write ``records.npz`` so ``export`` can regenerate every output."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = list(step_rows(run))
    np.savez_compressed(
        directory / "records.npz",
        meta=np.array(json.dumps({"format": "fsqp-mpcc-run", "version": FORMAT_VERSION,
                                  "mode": run.mode.value, "aborted": run.aborted, "message": run.message,
                                  "track_length": run.track_length, "spec": run.spec})),
        rows=np.array([[str(v) for v in row] for row in rows], dtype=str).reshape(len(rows), len(STEP_COLUMNS)),
    )
    return directory / "records.npz"


def load_run(directory) -> RunRecord:
    directory = Path(directory)
    path = directory / "records.npz"
    try:
        with np.load(path, allow_pickle=False) as npz:
            # NpzFile decompresses on every lookup, so read each array once
            data = {k: npz[k] for k in npz.files}
    except (OSError, KeyError) as exc:
        raise ValueError(f"{path}: {exc}") from None
    meta = json.loads(str(data["meta"]))
    if meta.get("format") != "fsqp-mpcc-run" or meta.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: not a version {FORMAT_VERSION} run record")
    run = RunRecord(Mode(meta["mode"]), aborted=meta["aborted"], message=meta["message"],
                    track_length=meta["track_length"], spec=meta["spec"])
    for row in data["rows"]:
        d = dict(zip(STEP_COLUMNS, row))
        run.steps.append(StepRecord(
            t=int(d["t"]), state=np.array([float(d[c]) for c in STEP_COLUMNS[1:10]]),
            applied=np.array([float(d[c]) for c in STEP_COLUMNS[10:13]]), status=d["status"],
            outer=int(d["outer"]), inner=int(d["inner"]), wall_time=float(d["wall_time"]),
            objective=float(d["objective"]), cv=float(d["cv"]), provenance=d["provenance"],
            shift_cv=float(d["shift_cv"])))
    return run


def export_run(run: RunRecord, directory, formats: Sequence[str] = ("csv", "json"),
               plots: bool = True, spline: Optional[TrackSpline] = None) -> list[Path]:
    """CSV per step, JSON summary, trajectory dump and optional figures."""
    directory = Path(directory)
    out = []
    if "csv" in formats:
        out.append(_write_csv(directory / "steps.csv", "steps", STEP_COLUMNS, step_rows(run)))
        out.append(_write_csv(directory / "trajectory.csv", "trajectory", ("t", "x", "y", "v_f"),
                              ([r.t, float(r.state[PX]), float(r.state[PY]), float(r.state[VF])]
                               for r in run.steps)))
    if "json" in formats:
        out.append(_write_json(directory / "summary.json", run.summary()))
    if plots:
        from . import plotting
        out += plotting.run_figures(run, directory, spline)
    return out


def replay_rows(table: ReplayTable):
    modes = list(table.results)
    for k, t in enumerate(table.t):
        row = [int(t)]
        for m in modes:
            res = table.results[m]
            row += [res["status"][k], float(res["cost"][k]), float(res["wall_time"][k]), float(res["cv"][k])]
        yield row


def export_replay(table: ReplayTable, directory, plots: bool = True) -> list[Path]:
    directory = Path(directory)
    header = ["t"] + [f"{m}_{k}" for m in table.results for k in REPLAY_FIELDS]
    out = [_write_csv(directory / "replay.csv", "replay", header, replay_rows(table)),
           _write_json(directory / "replay_summary.json", table.summary())]
    if plots:
        from . import plotting
        out += plotting.replay_figures(table, directory)
    return out


def max_track_violation(run: RunRecord, spline: TrackSpline) -> float:
    if not run.steps:
        return 0.0
    xs = np.array([r.state for r in run.steps])
    return float(np.max(track_constraint(xs, spline)))


__all__ = [
    "InstanceLog", "ReplayTable", "RunRecord", "Setup", "TrialResult", "calibrate_delta",
    "export_replay", "export_run", "load_instances", "load_run", "noise_sequence", "open_loop_trials",
    "read_csv", "replay", "run_closed_loop", "save_instances", "save_run", "trace_line", "trial_rng",
]
