"""Receding-horizon controller: shifting, warm starts and the open-loop fallback."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .fsqp import Iterate, Mode, SolverSettings, certificate, constraint_violation, run
from .ocp import OcpConfig, TrajectoryNlp, build_nlp
from .terminal import TerminalSet
from .track import TrackSpline
from .vehicle import NX, THETA, VehicleParams


class ControllerAbort(RuntimeError):
    """Raised when the plan has been shifted more than ``M_max`` times in a row."""


@dataclass
class Candidate:
    """A horizon plan with its multipliers.

    ``shifts`` counts consecutive shifts since the last successful solve;
    zero means the plan came straight out of a solver (or the transitional
    trajectory at start-up).
    """

    xs: np.ndarray
    us: np.ndarray
    xis: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    shifts: int = 0
    active: tuple[int, ...] = ()

    @property
    def N(self) -> int:
        return len(self.us)

    @property
    def provenance(self) -> str:
        return "solved" if self.shifts == 0 else f"shifted^{self.shifts}"

    def copy(self) -> "Candidate":
        return Candidate(self.xs.copy(), self.us.copy(), self.xis.copy(), self.lam.copy(),
                         self.mu.copy(), self.shifts, tuple(self.active))


def _stage_h(config: OcpConfig) -> int:
    return 8 + 2 + (2 if config.bound_dtheta else 0)


def shift(cand: Candidate, x_target, u_last, config: OcpConfig) -> Candidate:
    """Drop the first stage, append ``u_last`` and the new terminal state.

    Multipliers move one stage forward with zeros in the freed slots.  The
    initial-state multiplier takes the costate of the old first dynamics
    row; terminal multipliers are kept.
    """
    N = cand.N
    xs = np.vstack([cand.xs[1:], np.asarray(x_target, dtype=float)[None]])
    us = np.vstack([cand.us[1:], np.asarray(u_last, dtype=float)[None]])
    xis = np.append(cand.xis[1:], 0.0)

    lam = np.zeros_like(cand.lam)
    n_term = len(cand.lam) - NX - NX * N
    dyn = cand.lam[NX: NX + NX * N].reshape(N, NX)
    lam[:NX] = dyn[0]
    lam[NX: NX + NX * (N - 1)] = dyn[1:].ravel()
    if n_term:
        lam[-n_term:] = cand.lam[-n_term:]

    sh = _stage_h(config)
    mu = np.zeros_like(cand.mu)
    mu[: sh * (N - 1)] = cand.mu[sh: sh * N]
    mu[sh * N:] = cand.mu[sh * N:]
    active = tuple(i - sh if i < sh * N else i for i in cand.active if i >= sh)
    return Candidate(xs, us, xis, lam, mu, cand.shifts + 1, active)


@dataclass
class Instance:
    """Everything needed to rebuild and re-solve one receding-horizon problem."""

    t: int
    x_tilde: np.ndarray
    theta_hats: np.ndarray
    x_f: np.ndarray
    y0: np.ndarray
    lam0: np.ndarray
    mu0: np.ndarray
    active: tuple[int, ...] = ()


@dataclass
class StepRecord:
    t: int
    state: np.ndarray
    applied: np.ndarray
    status: str
    outer: int
    inner: int
    wall_time: float
    objective: float
    cv: float
    provenance: str
    message: str = ""
    shift_cv: float = float("nan")
    instance: Optional[Instance] = None
    y: Optional[np.ndarray] = field(default=None, repr=False)


class Controller:
    """Solves one problem per tick and falls back on the shifted plan.

    The plan adopted at the previous tick is kept in ``previous``; at
    ``t == 0`` the first ``N`` steps of the transitional trajectory play
    that role.
    """

    def __init__(self, config: OcpConfig, spline: TrackSpline, params: VehicleParams,
                 terminal: TerminalSet, settings: SolverSettings = SolverSettings(), M_max: int = 5):
        if M_max < 0:
            raise ValueError("M_max must be nonnegative")
        if terminal.params_digest != params.digest():
            raise ValueError("terminal artifact was computed for different vehicle parameters")
        self.config = config
        self.spline = spline
        self.params = params
        self.terminal = terminal
        self.settings = settings
        self.M_max = M_max
        self.previous: Optional[Candidate] = None

    # -- plans ---------------------------------------------------------------
    def initial_candidate(self) -> Candidate:
        N = self.config.N
        xs = np.array([self.terminal.state(j) for j in range(N + 1)])
        us = np.array([self.terminal.input(j) for j in range(N)])
        nlp = self.problem(xs[0], 0, xs[:, THETA])
        return Candidate(xs, us, np.zeros(N), np.zeros(nlp.n_g), np.zeros(nlp.n_h))

    def candidate_for(self, t: int) -> Candidate:
        """Warm start for tick ``t``: the shifted previous plan."""
        if self.previous is None:
            return self.initial_candidate()
        N = self.config.N
        return shift(self.previous, self.terminal.state(t + N), self.terminal.input(t + N - 1), self.config)

    def problem(self, x_tilde, t: int, theta_hats) -> TrajectoryNlp:
        target = self.terminal.target(t, self.config.N)
        return build_nlp(self.config, self.spline, self.params, x_tilde, theta_hats, target)

    def instance(self, measured, t: int, cand: Candidate) -> Instance:
        xs = cand.xs.copy()
        xs[0] = measured
        nlp_layout_y = np.concatenate([xs.ravel(), cand.us.ravel(), cand.xis])
        return Instance(t, np.array(measured, dtype=float), cand.xs[:, THETA].copy(),
                        self.terminal.target(t, self.config.N), nlp_layout_y, cand.lam.copy(),
                        cand.mu.copy(), tuple(cand.active))

    # -- one tick --------------------------------------------------------------
    def control_step(self, measured, t: int, mode: Optional[Mode] = None, fail: bool = False):
        """Compute the input to apply at tick ``t``.

        ``fail`` skips the solver and forces the fallback, for fault injection.
        Returns ``(u, candidate, record)``; raises :class:`ControllerAbort`
        when the fallback cap is exceeded.
        """
        measured = np.asarray(measured, dtype=float)
        settings = self.settings if mode is None else replace(self.settings, mode=Mode(mode))
        cand = self.candidate_for(t)
        inst = self.instance(measured, t, cand)
        nlp = self.problem(measured, t, inst.theta_hats)
        shift_cv = constraint_violation(*nlp.constraints(inst.y0))
        if fail:
            res = None
        else:
            res = solve_instance(nlp, inst, settings)
        if res is not None and res.ok:
            xs, us, xis = nlp.layout.split(res.iterate.y)
            new = Candidate(xs.copy(), us.copy(), xis.copy(), res.iterate.lam.copy(),
                            res.iterate.mu.copy(), 0, tuple(res.active))
            y = res.iterate.y
        else:
            if self.previous is None and t == 0:
                # the transitional plan is the only fallback at start-up
                cand = replace(cand, shifts=1)
            new = cand
            if new.shifts > self.M_max:
                raise ControllerAbort(f"fallback cap M_max={self.M_max} exceeded at t={t}")
            y = inst.y0
        g, h = nlp.constraints(y)
        rec = StepRecord(
            t=t,
            state=measured.copy(),
            applied=new.us[0].copy(),
            status="failed" if res is None else res.status.value,
            outer=0 if res is None else len(res.records),
            inner=0 if res is None else res.inner_iterations,
            wall_time=0.0 if res is None else res.wall_time,
            objective=float(nlp.objective(y)),
            cv=constraint_violation(g, h),
            provenance=new.provenance,
            message="forced failure" if fail else ("" if res is None else res.message),
            shift_cv=shift_cv,
            instance=inst,
            y=np.array(y),
        )
        self.previous = new
        return new.us[0].copy(), new, rec


def solve_instance(nlp, inst: Instance, settings: SolverSettings):
    """Run the configured solver on a logged instance."""
    init = Iterate(inst.y0.copy(), inst.lam0.copy(), inst.mu0.copy())
    return run(nlp, init, settings, warm_start=inst.active or None)


def rebuild(controller: Controller, inst: Instance) -> TrajectoryNlp:
    return build_nlp(controller.config, controller.spline, controller.params, inst.x_tilde,
                     inst.theta_hats, inst.x_f)


def cv_certificate(nlp, y) -> float:
    g, h = nlp.constraints(y)
    return certificate(g, h)


__all__ = ["Candidate", "Controller", "ControllerAbort", "Instance", "StepRecord", "shift",
           "solve_instance", "rebuild"]
