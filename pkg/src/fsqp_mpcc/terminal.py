"""Offline terminal trajectories: one periodic lap and a start-up transition.

The periodic lap ``x_f(0..T-1)`` closes on itself after one rotation of the
heading and one track length of progress.  The transitional trajectory
starts at rest and ends on ``x_f(0)`` shifted by that same lap offset, so the
time-indexed terminal target is continuous across the seam.

Heading and progress are kept unwrapped throughout: a state ``k`` laps later
differs by ``k * offset``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from .fsqp import Iterate, SolverSettings, Status, full_solve, solve
from .ocp import OcpConfig, TrajectoryNlp
from .track import TrackSpline, track_constraint
from .vehicle import (
    DELTA, GAMMA, NU, NX, OMEGA, PX, PY, TAU, THETA, VF, VehicleParams, rk4_step, rollout,
)

log = logging.getLogger(__name__)

ARTIFACT_VERSION = 1

TERMINAL_SETTINGS = SolverSettings(eps_tol=1e-10, inner_max=60, feas_tol=1e-9, qp_max_iter=20000,
                                   full_i_max=60, full_eps_tol=1e-7)


class TerminalError(RuntimeError):
    pass


def lap_offset(spline: TrackSpline) -> np.ndarray:
    """State increment over one lap: heading turns once, progress grows by the track length."""
    off = np.zeros(NX)
    off[GAMMA] = 2.0 * np.pi * spline.orientation
    off[THETA] = spline.length
    return off


@dataclass
class TerminalTrajectory:
    """States and inputs of a terminal trajectory.

    ``periodic``: ``states`` has ``T`` rows and ``x_f(T) = x_f(0) + offset``.
    ``transitional``: ``states`` has ``T~ + 1`` rows, the last one being the
    join with the periodic lap.
    """

    kind: str
    states: np.ndarray
    inputs: np.ndarray
    offset: np.ndarray = field(default_factory=lambda: np.zeros(NX))

    @property
    def length(self) -> int:
        return len(self.inputs)

    def state(self, k: int) -> np.ndarray:
        """Unwrapped state at step ``k`` (any ``k >= 0`` for periodic laps)."""
        if self.kind == "periodic":
            laps, j = divmod(int(k), self.length)
            return self.states[j] + laps * self.offset
        return self.states[k]

    def input(self, k: int) -> np.ndarray:
        if self.kind == "periodic":
            return self.inputs[int(k) % self.length]
        return self.inputs[k]

    def closed_states(self) -> np.ndarray:
        """States including the closing one (``x_f(T)`` for a lap)."""
        if self.kind == "periodic":
            return np.vstack([self.states, self.states[0] + self.offset])
        return self.states


@dataclass
class TerminalSet:
    """Both trajectories plus what they were computed for."""

    periodic: TerminalTrajectory
    transitional: TerminalTrajectory
    params_digest: str = ""
    config: dict = field(default_factory=dict)
    margin: float = 0.0

    @property
    def T(self) -> int:
        return self.periodic.length

    @property
    def T_tilde(self) -> int:
        return self.transitional.length

    def state(self, j: int) -> np.ndarray:
        """Terminal state at absolute trajectory index ``j``."""
        if j < self.T_tilde:
            return self.transitional.states[j]
        return self.periodic.state(j - self.T_tilde) + self.periodic.offset

    def input(self, j: int) -> np.ndarray:
        """Input driving terminal state ``j`` to ``j + 1``."""
        if j < self.T_tilde:
            return self.transitional.inputs[j]
        return self.periodic.input(j - self.T_tilde)

    def target(self, t: int, N: int) -> np.ndarray:
        return self.state(t + N)

    def target_input(self, t: int, N: int) -> np.ndarray:
        return self.input(t + N)


def terminal_target(periodic: TerminalTrajectory, transitional: TerminalTrajectory, t: int, N: int) -> np.ndarray:
    """Terminal state for the problem solved at step ``t`` with horizon ``N``."""
    return TerminalSet(periodic, transitional).target(t, N)


# -- initial guesses --------------------------------------------------------

def _track_controller(x, v_ref, spline: TrackSpline, params: VehicleParams, config: OcpConfig):
    """Simple lateral/speed feedback used only to build initial guesses."""
    th = spline.project(x[[PX, PY]], x[THETA], window=0.3)
    px, py, dx, dy = spline.eval_center(th)
    heading = np.arctan2(dy, dx)
    lat = -(x[PX] - px) * dy + (x[PY] - py) * dx
    err = np.angle(np.exp(1j * (x[GAMMA] - heading)))
    delta = np.clip(-1.5 * err - 2.0 * lat - 0.05 * x[OMEGA], 0.9 * config.delta_min, 0.9 * config.delta_max)
    v = x[VF]
    ff = (params.C_d * v**2 + params.C_roll) / (params.C_m1 - params.C_m2 * v)
    tau = np.clip(0.8 * (v_ref - v) + ff, 0.9 * config.tau_min, 0.9 * config.tau_max)
    dtau = np.clip((tau - x[TAU]) / config.dt, 0.9 * config.dtau_min, 0.9 * config.dtau_max)
    ddelta = np.clip((delta - x[DELTA]) / config.dt, 0.9 * config.ddelta_min, 0.9 * config.ddelta_max)
    dtheta = np.clip(max(v, 0.0) + 2.0 * (th - x[THETA]), config.dtheta_min, config.dtheta_max)
    return np.array([dtau, ddelta, dtheta])


def start_state(spline: TrackSpline, theta: float = 0.0) -> np.ndarray:
    """Car at rest on the centerline, aligned with the track."""
    x = np.zeros(NX)
    x[PX], x[PY] = spline.position(theta)
    x[GAMMA] = float(spline.heading(theta))
    x[THETA] = theta
    return x


def tracking_rollout(x0, steps: int, spline: TrackSpline, params: VehicleParams, config: OcpConfig,
                     v_ref, theta_ref=None, gain: float = 1.5):
    """Closed-loop simulation of the guess controller.

    ``v_ref`` may be a scalar or a per-step array; with ``theta_ref`` the
    speed reference is corrected toward that progress schedule.
    """
    xs = np.empty((steps + 1, NX))
    us = np.empty((steps, NU))
    xs[0] = x0
    v_ref = np.broadcast_to(np.asarray(v_ref, dtype=float), (steps,))
    for k in range(steps):
        v = v_ref[k]
        if theta_ref is not None:
            v = v + gain * (theta_ref[k + 1] - xs[k, THETA])
        us[k] = _track_controller(xs[k], v, spline, params, config)
        xs[k + 1] = rk4_step(xs[k], us[k], params, config.dt)
    return xs, us


# -- trajectory optimization --------------------------------------------------

def _scaled(config: OcpConfig, scale: float) -> OcpConfig:
    """Config whose tracking cost is ``scale`` times the original."""
    r = float(np.sqrt(scale))
    return config.with_(q_C=config.q_C * r, q_L=config.q_L * r, q_dtau=config.q_dtau * r,
                        q_ddelta=config.q_ddelta * r, q_dtheta=config.q_dtheta * r)


def _optimize(config, spline, params, xs, us, *, x_tilde, terminal, x_f, width, settings, rounds=2,
              prox=(1.0, 0.1, 0.01), prox_iters: int = 15, warm=None):
    """Slack-free trajectory optimization with progress re-linearization.

    A proximal term around each outer point is first added to both
    Hessians, with a decreasing weight from ``prox``.  It keeps every inner
    fixed point near its outer point; since it vanishes once the outer
    iteration stops moving, it only shapes the path.  The last stage is a
    plain ``full_solve``.  ``warm`` is an optional ``(lam, mu, active)``.
    """
    T = len(us)
    res = None
    theta_hats = xs[:, THETA].copy()
    for r in range(rounds):
        if res is not None:
            lam, mu, active = res.iterate.lam, res.iterate.mu, res.active
        elif warm is not None:
            lam, mu, active = warm
        else:
            lam = mu = active = None
        # later rounds start close to the solution
        stages = [(rho, prox_iters) for rho in (prox if r == 0 else prox[-1:])] + [(0.0, None)]
        for rho, iters in stages:
            nlp = TrajectoryNlp(config.with_(prox=rho), spline, params, theta_hats, x_tilde=x_tilde,
                                terminal=terminal, x_f=x_f, slack=False, horizon=T, width=width)
            y = nlp.layout.pack(xs, us)
            init = Iterate.cold(nlp, y) if lam is None else Iterate(y, lam.copy(), mu.copy())
            if iters is None:
                res = full_solve(nlp, init, settings, warm_start=active)
            else:
                res = solve(nlp, init, settings, warm_start=active, i_max=iters,
                            eps_tol=settings.full_eps_tol)
            if res.status is Status.FAILED:
                return res, nlp
            xs, us, _ = nlp.layout.split(res.iterate.y)
            xs, us = xs.copy(), us.copy()
            lam, mu, active = res.iterate.lam, res.iterate.mu, res.active
        if np.max(np.abs(xs[:, THETA] - theta_hats)) < 1e-6:
            break
        theta_hats = xs[:, THETA].copy()
    return res, nlp


def _homotopy(solve_at, xs, us, max_splits: int = 8):
    """Walk a parameter from 0 to 1, halving the stride whenever a solve fails.

    ``solve_at(a, xs, us, prev)`` returns ``(result, nlp)``; ``prev`` is the
    last accepted ``(a, result)`` or ``None``.
    """
    alpha, stride, splits = 0.0, 1.0, 0
    prev = None
    while alpha < 1.0:
        a = min(1.0, alpha + stride)
        r, nlp = solve_at(a, xs, us, prev)
        if r.status is Status.FAILED:
            splits += 1
            if splits > max_splits:
                raise TerminalError(f"trajectory optimization failed ({r.message}); try a larger horizon")
            stride *= 0.5
            continue
        alpha, prev = a, (a, r)
        s_xs, s_us, _ = nlp.layout.split(r.iterate.y)
        xs, us = s_xs.copy(), s_us.copy()
        stride = min(2 * stride, 1.0)
        log.debug("homotopy reached %.4f", alpha)
    return xs, us, prev[1]


def _continuation(config, spline, params, xs, us, *, x_tilde, terminal, target, width, settings,
                  scale0: float = 1.0):
    """Solve from a rough guess in two homotopies.

    The end condition first moves from the guess to ``target`` with the
    tracking cost scaled down by ``scale0``, which makes each solve mostly
    a feasibility restoration.  The cost is then raised back to full weight
    geometrically.  Frozen-derivative inner loops only converge from nearby
    starts, so both walks refine their stride on failure.
    """
    start = (xs[-1] - xs[0]) if terminal == "periodic" else xs[-1].copy()
    low = _scaled(config, scale0)

    def warm(prev, factor=1.0):
        if prev is None:
            return None
        r = prev[1]
        return r.iterate.lam * factor, r.iterate.mu * factor, r.active

    def move_end(a, xs_, us_, prev):
        return _optimize(low, spline, params, xs_, us_, x_tilde=x_tilde, terminal=terminal,
                         x_f=(1 - a) * start + a * target, width=width, settings=settings, warm=warm(prev))

    xs, us, res = _homotopy(move_end, xs, us)
    if scale0 == 1.0:
        return xs, us, res

    def raise_cost(a, xs_, us_, prev):
        a_prev, r_prev = prev if prev is not None else (0.0, res)
        factor = scale0 ** (a_prev - a)
        return _optimize(_scaled(config, scale0 ** (1 - a)), spline, params, xs_, us_, x_tilde=x_tilde,
                         terminal=terminal, x_f=target, width=width, settings=settings,
                         warm=warm((a_prev, r_prev), factor))

    xs, us, res = _homotopy(raise_cost, xs, us)
    return xs, us, res


def compute_periodic(config: OcpConfig, spline: TrackSpline, params: VehicleParams, T: int,
                     margin: float = 0.03, settings: SolverSettings = TERMINAL_SETTINGS) -> TerminalTrajectory:
    """Optimal lap of exactly ``T`` steps that repeats itself.

    The track constraint is hard and uses the width reduced by ``2 * margin``.
    """
    if T < 10:
        raise ValueError("period T is too short")
    width = spline.width - 2 * margin
    if width <= 0:
        raise ValueError("margin leaves no track")
    offset = lap_offset(spline)
    v = spline.length / (T * config.dt)
    # settle at lap speed, then record one lap starting near progress 0
    warm = int(2.5 * T)
    xs, us = tracking_rollout(start_state(spline), warm, spline, params, config, v)
    laps = np.floor(xs[:, THETA] / spline.length)
    if laps[-1] < 2:
        raise TerminalError(f"guess controller cannot hold the lap speed {v:.2f} m/s; try a larger T")
    k0 = int(np.flatnonzero(laps >= 2)[0])
    xs, us = xs[k0: k0 + T + 1].copy(), us[k0: k0 + T].copy()
    if len(us) < T:
        xs, us = tracking_rollout(xs[0], T, spline, params, config, v)
    shift = np.floor(xs[0, THETA] / spline.length)
    xs[:, THETA] -= shift * spline.length
    xs[:, GAMMA] -= 2 * np.pi * np.round((xs[0, GAMMA] - spline.heading(xs[0, THETA])) / (2 * np.pi))
    xs, us, res = _continuation(config, spline, params, xs, us, x_tilde=None, terminal="periodic",
                                target=offset, width=width, settings=settings)
    traj = TerminalTrajectory("periodic", xs[:-1].copy(), us.copy(), offset)
    check_trajectory(traj, spline, params, config, tol=1e-8, width=spline.width)
    return traj


def compute_transition(config: OcpConfig, spline: TrackSpline, params: VehicleParams, x0,
                       T_tilde: int, periodic: TerminalTrajectory, margin: float = 0.03,
                       settings: SolverSettings = TERMINAL_SETTINGS) -> TerminalTrajectory:
    """Trajectory from the resting state ``x0`` onto ``x_f(0)`` one lap later."""
    x0 = np.asarray(x0, dtype=float)
    if T_tilde <= periodic.length:
        raise ValueError("the transition horizon must exceed the lap period")
    width = spline.width - 2 * margin
    target = periodic.states[0] + periodic.offset
    # progress schedule: accelerate uniformly, then hold the lap speed
    v_lap = spline.length / (periodic.length * config.dt)
    dist = target[THETA] - x0[THETA]
    t_total = T_tilde * config.dt
    t_acc = max(2.0 * (t_total - dist / v_lap), 0.1 * t_total)
    t_acc = min(t_acc, 0.9 * t_total)
    vmax = dist / (t_total - 0.5 * t_acc)
    tk = np.arange(T_tilde + 1) * config.dt
    theta_ref = x0[THETA] + np.where(tk < t_acc, 0.5 * vmax / t_acc * tk**2, 0.5 * vmax * t_acc + vmax * (tk - t_acc))
    v_ref = np.where(tk[:-1] < t_acc, vmax * tk[:-1] / t_acc, vmax)
    xs, us = tracking_rollout(x0, T_tilde, spline, params, config, v_ref, theta_ref)
    xs, us, res = _continuation(config, spline, params, xs, us, x_tilde=x0, terminal="equality",
                                target=target, width=width, settings=settings)
    traj = TerminalTrajectory("transitional", xs.copy(), us.copy(), periodic.offset.copy())
    check_trajectory(traj, spline, params, config, tol=1e-8, width=spline.width)
    return traj


def check_trajectory(traj: TerminalTrajectory, spline: TrackSpline, params: VehicleParams,
                     config: OcpConfig, tol: float = 1e-8, width: Optional[float] = None) -> dict:
    """Verify dynamics, track membership and bounds; raise on violation."""
    xs = traj.closed_states()
    us = traj.inputs
    nxt = rk4_step(xs[:-1], us, params, config.dt)
    report = {
        "dynamics": float(np.max(np.abs(nxt - xs[1:]))),
        "track": float(np.max(track_constraint(xs, spline, width))),
        "tau": float(max(np.max(xs[:-1, TAU]) - config.tau_max, config.tau_min - np.min(xs[:-1, TAU]))),
        "delta": float(max(np.max(xs[:-1, DELTA]) - config.delta_max, config.delta_min - np.min(xs[:-1, DELTA]))),
        "dtau": float(max(np.max(us[:, 0]) - config.dtau_max, config.dtau_min - np.min(us[:, 0]))),
        "ddelta": float(max(np.max(us[:, 1]) - config.ddelta_max, config.ddelta_min - np.min(us[:, 1]))),
    }
    bad = {k: v for k, v in report.items() if v > tol}
    if bad:
        raise TerminalError(f"{traj.kind} trajectory violates its invariants: {bad}")
    return report


def compute_terminal_set(config: OcpConfig, spline: TrackSpline, params: VehicleParams, T: int,
                         T_tilde: Optional[int] = None, margin: float = 0.03,
                         settings: SolverSettings = TERMINAL_SETTINGS) -> TerminalSet:
    T_tilde = T_tilde if T_tilde is not None else T + max(config.N, 30)
    periodic = compute_periodic(config, spline, params, T, margin, settings)
    trans = compute_transition(config, spline, params, start_state(spline), T_tilde, periodic, margin, settings)
    return TerminalSet(periodic, trans, params.digest(), config.to_dict(), margin)


# -- deadbeat reachability ------------------------------------------------------

def deadbeat_reach(x, j: int, k: int, params: VehicleParams, terminal: TerminalSet,
                   config: OcpConfig, tol: float = 1e-8) -> Optional[np.ndarray]:
    """Inputs steering ``x`` onto terminal state ``j + k`` in ``k`` steps.

    ``x`` is compared with terminal state ``j``; the reference inputs start
    the search.  Returns ``None`` when no admissible sequence with residual
    at most ``tol`` is found.
    """
    x = np.asarray(x, dtype=float)
    if k < 1:
        raise ValueError("k must be positive")
    if not np.all(np.isfinite(x)):
        return None
    goal = terminal.state(j + k)
    u_ref = np.array([terminal.input(j + i) for i in range(k)])
    lo = np.tile([config.dtau_min, config.ddelta_min, config.dtheta_min], k)
    hi = np.tile([config.dtau_max, config.ddelta_max, config.dtheta_max], k)
    u0 = np.clip(u_ref.ravel(), lo, hi)

    def resid(u):
        return rollout(x, u.reshape(k, NU), params, config.dt)[-1] - goal

    try:
        r0 = resid(u0)
        if np.max(np.abs(r0)) <= tol:
            return u0.reshape(k, NU)
        if not np.all(np.isfinite(r0)):
            return None
        sol = least_squares(resid, u0, bounds=(lo, hi), xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=200 * k)
    except (ValueError, FloatingPointError):
        return None
    if not np.all(np.isfinite(sol.fun)) or np.max(np.abs(sol.fun)) > tol:
        return None
    u = sol.x.reshape(k, NU)
    states = rollout(x, u, params, config.dt)
    if np.any(states[:-1, TAU] > config.tau_max + tol) or np.any(states[:-1, TAU] < config.tau_min - tol):
        return None
    if np.any(states[:-1, DELTA] > config.delta_max + tol) or np.any(states[:-1, DELTA] < config.delta_min - tol):
        return None
    return u


# -- persistence ----------------------------------------------------------------

def save_terminal_set(ts: TerminalSet, path) -> Path:
    path = Path(path)
    blob = {
        "format": "fsqp-mpcc-terminal",
        "version": ARTIFACT_VERSION,
        "params_digest": ts.params_digest,
        "config": ts.config,
        "margin": ts.margin,
        "T": ts.T,
        "T_tilde": ts.T_tilde,
        "offset": ts.periodic.offset.tolist(),
        "periodic": {"states": ts.periodic.states.tolist(), "inputs": ts.periodic.inputs.tolist()},
        "transitional": {"states": ts.transitional.states.tolist(), "inputs": ts.transitional.inputs.tolist()},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        json.dump(blob, fh)
    return path


def load_terminal_set(path, params: Optional[VehicleParams] = None) -> TerminalSet:
    """Read an artifact; with ``params`` its digest must match."""
    path = Path(path)
    with path.open() as fh:
        blob = json.load(fh)
    if blob.get("format") != "fsqp-mpcc-terminal":
        raise ValueError(f"{path}: not a terminal artifact")
    if blob.get("version") != ARTIFACT_VERSION:
        raise ValueError(f"{path}: unsupported artifact version {blob.get('version')}")
    if params is not None and blob["params_digest"] != params.digest():
        raise ValueError(f"{path}: computed for different vehicle parameters "
                         f"({blob['params_digest']} != {params.digest()})")
    off = np.asarray(blob["offset"], dtype=float)
    per = TerminalTrajectory("periodic", np.asarray(blob["periodic"]["states"]),
                             np.asarray(blob["periodic"]["inputs"]), off)
    tra = TerminalTrajectory("transitional", np.asarray(blob["transitional"]["states"]),
                             np.asarray(blob["transitional"]["inputs"]), off.copy())
    return TerminalSet(per, tra, blob["params_digest"], blob.get("config", {}), blob.get("margin", 0.0))
