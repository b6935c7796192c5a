"""Feasible SQP with frozen outer derivatives, plus RTI and run-to-convergence modes.

Each outer iteration evaluates gradients, Jacobians and the two Hessian
approximations ``M`` (QP Hessian) and ``P`` (gradient correction) once.  The
inner loop then repeatedly solves a QP whose constraint values are the true
nonlinear ``g``, ``h`` at the current inner point, so a converged inner loop
lands on a point that satisfies the nonlinear constraints.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from .qp import QpSolver


class Mode(str, Enum):
    FSQP = "fsqp"
    RTI = "rti"
    FULL = "full"


class Status(str, Enum):
    CONVERGED = "converged"
    FEASIBLE_SUBOPTIMAL = "feasible_suboptimal"
    FAILED = "failed"


@dataclass(frozen=True)
class SolverSettings:
    mode: Mode = Mode.FSQP
    i_max: int = 1
    eps_tol: float = 1e-6
    inner_max: int = 20
    feas_tol: float = 1e-6
    qp_tol: float = 1e-8
    qp_max_iter: int = 1000
    full_i_max: int = 50
    full_eps_tol: float = 1e-8

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.i_max < 1 or self.full_i_max < 1:
            raise ValueError("i_max must be >= 1")
        if not (self.eps_tol > 0 and self.feas_tol > 0 and self.full_eps_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.inner_max < 1:
            raise ValueError("inner_max must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "SolverSettings":
        return cls(**data)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["mode"] = self.mode.value
        return out


@dataclass
class Iterate:
    y: np.ndarray
    lam: np.ndarray
    mu: np.ndarray

    @classmethod
    def cold(cls, nlp, y) -> "Iterate":
        return cls(np.array(y, dtype=float), np.zeros(nlp.n_g), np.zeros(nlp.n_h))

    def copy(self) -> "Iterate":
        return Iterate(self.y.copy(), self.lam.copy(), self.mu.copy())

    def vector(self) -> np.ndarray:
        return np.concatenate([self.y, self.lam, self.mu])


@dataclass
class OuterRecord:
    inner_iterations: int
    wall_time: float
    objective: float
    cv: float
    step_norm: float
    qp_iterations: int = 0


@dataclass
class SolveResult:
    iterate: Iterate
    status: Status
    records: list[OuterRecord] = field(default_factory=list)
    certificate: float = np.inf
    wall_time: float = 0.0
    active: tuple[int, ...] = ()
    message: str = ""
    outer: Optional[Iterate] = None

    @property
    def ok(self) -> bool:
        return self.status is not Status.FAILED

    @property
    def inner_iterations(self) -> int:
        return sum(r.inner_iterations for r in self.records)


def constraint_violation(g, h) -> float:
    """Euclidean norm of the equality residuals and positive inequality parts."""
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    return float(np.sqrt(np.sum(g * g) + np.sum(np.square(np.maximum(h, 0.0)))))


def certificate(g, h) -> float:
    """Largest nonlinear constraint violation (max-norm)."""
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    return float(max(np.max(np.abs(g), initial=0.0), np.max(h, initial=0.0)))


def perturbed_gradient(grad_outer, P, y_outer, y_inner) -> np.ndarray:
    """``a = grad f(y_outer) + P (y_inner - y_outer)``."""
    return np.asarray(grad_outer, dtype=float) + P @ (np.asarray(y_inner) - np.asarray(y_outer))


def _qp_solver(lin, settings: SolverSettings) -> QpSolver:
    return QpSolver(lin.M, lin.Jg, lin.Jh, elimination=lin.elimination,
                    tol=settings.qp_tol, max_iter=settings.qp_max_iter)


def inner_loop(nlp, lin, outer: Iterate, start: Iterate, settings: SolverSettings,
               qp: Optional[QpSolver] = None, warm_start=None):
    """Frozen-derivative iterations from ``start`` until ``||dz|| < eps_tol``.

    Returns ``(iterate, status, info)`` where ``status`` is ``None`` on
    success or a failure reason, and ``info`` carries counts, the final QP
    active set and the last primal step.
    """
    qp = qp or _qp_solver(lin, settings)
    cur = start.copy()
    active = warm_start
    prev = np.inf
    increases = 0
    qp_iters = 0
    last_dy = None
    for k in range(1, settings.inner_max + 1):
        g, h = nlp.constraints(cur.y)
        a = perturbed_gradient(lin.grad, lin.P, outer.y, cur.y)
        sol = qp.solve(a, g, h, warm_start=active)
        qp_iters += sol.iterations
        if not sol.ok:
            return cur, f"qp_{sol.status.value}", dict(inner=k, qp_iterations=qp_iters, active=active, dy=last_dy)
        dz = float(np.sqrt(sol.dy @ sol.dy + np.sum((sol.lam - cur.lam) ** 2) + np.sum((sol.mu - cur.mu) ** 2)))
        cur = Iterate(cur.y + sol.dy, sol.lam, sol.mu)
        active = sol.active
        last_dy = sol.dy
        if not np.all(np.isfinite(cur.y)):
            return cur, "nonfinite", dict(inner=k, qp_iterations=qp_iters, active=active, dy=last_dy)
        if dz < settings.eps_tol:
            return cur, None, dict(inner=k, qp_iterations=qp_iters, active=active, dy=last_dy)
        increases = increases + 1 if dz > prev else 0
        if increases >= 3:
            return cur, "diverging", dict(inner=k, qp_iterations=qp_iters, active=active, dy=last_dy)
        prev = dz
    return cur, "inner_max", dict(inner=settings.inner_max, qp_iterations=qp_iters, active=active, dy=last_dy)


def solve(nlp, init: Iterate, settings: SolverSettings = SolverSettings(),
          warm_start=None, i_max: Optional[int] = None, eps_tol: Optional[float] = None) -> SolveResult:
    """Feasible SQP.  Every accepted outer iterate satisfies ``g = 0, h <= 0``
    up to ``feas_tol``, so the result is usable after any number of outer
    iterations."""
    i_max = settings.i_max if i_max is None else i_max
    eps = settings.eps_tol if eps_tol is None else eps_tol
    s_inner = replace(settings, eps_tol=eps) if eps != settings.eps_tol else settings
    t_start = time.perf_counter()
    outer = init.copy()
    feasible: Optional[Iterate] = None
    records: list[OuterRecord] = []
    active = warm_start
    cert = np.inf
    outer_point: Optional[Iterate] = None
    for _ in range(i_max):
        t0 = time.perf_counter()
        lin = nlp.linearize(outer.y, outer.lam, outer.mu, with_P=True)
        new, why, info = inner_loop(nlp, lin, outer, outer, s_inner, warm_start=active)
        g, h = nlp.constraints(new.y)
        c = certificate(g, h)
        cv = constraint_violation(g, h)
        step = float(np.linalg.norm(new.vector() - outer.vector()))
        records.append(OuterRecord(info["inner"], time.perf_counter() - t0, nlp.objective(new.y),
                                   cv, step, info["qp_iterations"]))
        # the 2-norm bounds the max-norm, so this certifies both
        if why is None and cv > settings.feas_tol:
            why = "infeasible_limit"
        if why is not None:
            base = feasible if feasible is not None else init
            return SolveResult(base.copy(), Status.FAILED, records, cert if feasible is not None else np.inf,
                               time.perf_counter() - t_start, tuple(active or ()), why, outer_point)
        outer_point = outer.copy()
        outer = new
        feasible = new
        cert = c
        active = info["active"]
        if step < eps:
            return SolveResult(outer.copy(), Status.CONVERGED, records, cert,
                               time.perf_counter() - t_start, tuple(active), "", outer_point)
    return SolveResult(outer.copy(), Status.FEASIBLE_SUBOPTIMAL, records, cert,
                       time.perf_counter() - t_start, tuple(active or ()), "", outer_point)


def rti_solve(nlp, init: Iterate, settings: SolverSettings = SolverSettings(), warm_start=None) -> SolveResult:
    """One standard SQP step: a single QP at ``init`` and a full step.

    The result is generally not feasible for the nonlinear constraints; its
    certificate is reported but never enforced.
    """
    t0 = time.perf_counter()
    lin = nlp.linearize(init.y, init.lam, init.mu, with_P=False)
    qp = _qp_solver(lin, settings)
    g, h = nlp.constraints(init.y)
    sol = qp.solve(lin.grad, g, h, warm_start=warm_start)
    if not sol.ok:
        return SolveResult(init.copy(), Status.FAILED, [], np.inf, time.perf_counter() - t0,
                           tuple(warm_start or ()), f"qp_{sol.status.value}")
    new = Iterate(init.y + sol.dy, sol.lam, sol.mu)
    wall = time.perf_counter() - t0
    g, h = nlp.constraints(new.y)
    rec = OuterRecord(1, wall, nlp.objective(new.y), constraint_violation(g, h),
                      float(np.linalg.norm(new.vector() - init.vector())), sol.iterations)
    return SolveResult(new, Status.FEASIBLE_SUBOPTIMAL, [rec], certificate(g, h), wall, sol.active, "",
                       init.copy())


def full_solve(nlp, init: Iterate, settings: SolverSettings = SolverSettings(), warm_start=None) -> SolveResult:
    """Feasible SQP run until the outer step vanishes; the local-optimum baseline."""
    res = solve(nlp, init, settings, warm_start=warm_start, i_max=settings.full_i_max,
                eps_tol=settings.full_eps_tol)
    if res.status is Status.FEASIBLE_SUBOPTIMAL:
        res.status = Status.FAILED
        res.message = "no convergence within full_i_max"
    return res


def run(nlp, init: Iterate, settings: SolverSettings, warm_start=None) -> SolveResult:
    """Dispatch on ``settings.mode``."""
    if settings.mode is Mode.RTI:
        return rti_solve(nlp, init, settings, warm_start)
    if settings.mode is Mode.FULL:
        return full_solve(nlp, init, settings, warm_start)
    return solve(nlp, init, settings, warm_start)


def perturbed_stationarity(nlp, result: SolveResult) -> float:
    """Max-norm stationarity residual of the perturbed NLP at a solve result.

    With ``z~`` the last outer point and ``z+`` the returned iterate this is
    ``grad f(y~) + P (y+ - y~) + Jg(y~)' lam+ + Jh(y~)' mu+``, which is the
    same as ``grad f(y+) + xi + Jg(y+)' lam+ + Jh(y+)' mu+``.
    """
    if result.outer is None:
        raise ValueError("result carries no outer linearization point")
    z, o = result.iterate, result.outer
    lin = nlp.linearize(o.y, o.lam, o.mu, with_P=True)
    r = lin.grad + lin.P @ (z.y - o.y) + lin.Jg.T @ z.lam + lin.Jh.T @ z.mu
    return float(np.max(np.abs(r), initial=0.0))
