"""Contouring-control trajectory problem written as a compact NLP.

The decision vector stacks states, inputs and track slacks::

    y = (x_0 .. x_N, u_0 .. u_{N-1}, xi_0 .. xi_{N-1})

and the problem is ``min f(y)  s.t.  g(y) = 0,  h(y) <= 0``.  The same class
also represents the slack-free terminal-trajectory problems (free initial
state, periodicity or fixed end state), see :class:`TrajectoryNlp`.

Dynamics derivatives come from ``jax`` applied to the model in
:mod:`fsqp_mpcc.vehicle`; everything else is written out by hand.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, fields
from typing import Any, Optional, Protocol

import numpy as np
import scipy.sparse as sp

import jax

jax.config.update("jax_enable_x64", True)
import jax.numpy as jnp  # noqa: E402

from .qp import Elimination  # noqa: E402
from .track import TrackSpline  # noqa: E402
from .vehicle import (  # noqa: E402
    DELTA, DDELTA, DT, DTAU, DTHETA, NU, NX, PX, PY, TAU, THETA,
    VehicleParams, rk4_step,
)

TERMINAL_KINDS = ("equality", "ball", "periodic", "none")


@dataclass(frozen=True)
class OcpConfig:
    """Horizon, weights and bounds of the contouring-control problem."""

    N: int = 40
    dt: float = DT
    q_C: float = 3.0
    q_L: float = 10.0
    q_dtau: float = 0.3
    q_ddelta: float = 0.3
    q_dtheta: float = 1.0
    v_bar: float = 2.0
    mu: float = 100.0
    tau_min: float = -1.0
    tau_max: float = 1.0
    delta_min: float = -0.35
    delta_max: float = 0.35
    dtau_min: float = -10.0
    dtau_max: float = 10.0
    ddelta_min: float = -4.0
    ddelta_max: float = 4.0
    dtheta_min: float = 0.0
    dtheta_max: float = 4.0
    bound_dtheta: bool = True
    r_f: float = 0.0
    terminal_weights: tuple = (1.0,) * NX
    eps_reg: float = 1e-8
    slack_reg: float = 1.0
    prox: float = 0.0
    hessian: str = "exact"
    qp_hessian: str = "projected"

    def __post_init__(self) -> None:
        if int(self.N) != self.N or self.N < 2:
            raise ValueError("horizon N must be an integer >= 2")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.mu > 0:
            raise ValueError("slack penalty mu must be positive")
        for name in ("q_C", "q_L", "q_dtau", "q_ddelta", "q_dtheta"):
            if getattr(self, name) < 0:
                raise ValueError(f"weight {name} must be nonnegative")
        for lo, hi in (("tau_min", "tau_max"), ("delta_min", "delta_max"),
                       ("dtau_min", "dtau_max"), ("ddelta_min", "ddelta_max"),
                       ("dtheta_min", "dtheta_max")):
            if not getattr(self, hi) > getattr(self, lo):
                raise ValueError(f"{hi} must exceed {lo}")
        if self.r_f < 0:
            raise ValueError("terminal radius r_f must be nonnegative")
        if len(self.terminal_weights) != NX or min(self.terminal_weights) < 0:
            raise ValueError("terminal_weights needs 9 nonnegative entries")
        if not self.eps_reg > 0 or self.slack_reg < 0 or self.prox < 0:
            raise ValueError("regularization must be positive")
        if self.hessian not in ("exact", "gauss_newton"):
            raise ValueError("hessian must be 'exact' or 'gauss_newton'")
        if self.qp_hessian not in ("projected", "gauss_newton"):
            raise ValueError("qp_hessian must be 'projected' or 'gauss_newton'")
        object.__setattr__(self, "terminal_weights", tuple(float(w) for w in self.terminal_weights))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "OcpConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ocp settings: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["terminal_weights"] = list(self.terminal_weights)
        return out

    def with_(self, **changes) -> "OcpConfig":
        data = asdict(self)
        data.update(changes)
        return OcpConfig(**data)


class Layout:
    """Index map of the decision vector."""

    def __init__(self, N: int, slack: bool = True):
        self.N = N
        self.slack = slack
        self.u0 = NX * (N + 1)
        self.xi0 = self.u0 + NU * N
        self.n = self.xi0 + (N if slack else 0)

    def x(self, i: int) -> slice:
        return slice(NX * i, NX * (i + 1))

    def u(self, i: int) -> slice:
        return slice(self.u0 + NU * i, self.u0 + NU * (i + 1))

    def xi(self, i: int) -> int:
        if not self.slack:
            raise IndexError("layout has no slacks")
        return self.xi0 + i

    def slice(self, kind: str, stage: int):
        return {"x": self.x, "u": self.u, "xi": self.xi}[kind](stage)

    def split(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n,):
            raise ValueError(f"decision vector must have length {self.n}, got {y.shape}")
        xs = y[: self.u0].reshape(self.N + 1, NX)
        us = y[self.u0: self.xi0].reshape(self.N, NU)
        xis = y[self.xi0:]
        return xs, us, xis

    def pack(self, xs, us, xis=None) -> np.ndarray:
        parts = [np.ravel(xs), np.ravel(us)]
        if self.slack:
            parts.append(np.zeros(self.N) if xis is None else np.ravel(xis))
        y = np.concatenate(parts).astype(float)
        if y.shape != (self.n,):
            raise ValueError("trajectory shapes do not match the layout")
        return y


class NlpProblem(Protocol):
    """What the solvers need from a problem."""

    n: int
    n_g: int
    n_h: int

    def objective(self, y) -> float: ...
    def gradient(self, y) -> np.ndarray: ...
    def constraints(self, y) -> tuple[np.ndarray, np.ndarray]: ...
    def jacobians(self, y) -> tuple[Any, Any]: ...
    def hessian_M(self, y) -> Any: ...
    def hessian_P(self, y, lam, mu) -> Any: ...
    def elimination(self, y) -> Optional[Elimination]: ...


@functools.lru_cache(maxsize=8)
def _kernels(params: VehicleParams, dt: float):
    """Compiled stage Jacobians and Hessians of the RK4 map."""

    def step(x, u):
        return rk4_step(x, u, params, dt, xp=jnp)

    jac = jax.jit(jax.vmap(jax.jacfwd(step, argnums=(0, 1))))

    def weighted(z, lam):
        return lam @ step(z[:NX], z[NX:])

    hess = jax.jit(jax.vmap(jax.hessian(weighted)))
    return jac, hess


def _np(a):
    return np.ascontiguousarray(a, dtype=float)


def dynamics_jacobians(xs, us, params: VehicleParams, dt: float):
    """Per-stage ``A_i = d psi / dx`` and ``B_i = d psi / du`` (batched)."""
    jac, _ = _kernels(params, float(dt))
    A, B = jac(_np(xs), _np(us))
    return np.asarray(A), np.asarray(B)


def dynamics_hessians(xs, us, lams, params: VehicleParams, dt: float) -> np.ndarray:
    """Per-stage Hessian of ``lam' psi(x, u)`` over ``(x, u)``, shape (N, 12, 12)."""
    _, hess = _kernels(params, float(dt))
    z = np.concatenate([xs, us], axis=1)
    return np.asarray(hess(z, _np(lams)))


class TrajectoryNlp:
    """Multiple-shooting NLP over a horizon of ``N`` steps.

    Parameters
    ----------
    x_tilde:
        Fixed initial state, or ``None`` for a free initial state.
    terminal:
        ``"equality"`` (``x_N = x_f``), ``"ball"`` (weighted distance to
        ``x_f`` at most ``r_f``), ``"periodic"`` (``x_N - x_0 = x_f``, with
        ``x_f`` the lap offset) or ``"none"``.
    slack:
        Soft track constraint with one slack per stage.  Without slacks the
        track constraint is hard.
    width:
        Track width used by the track constraint (defaults to the spline's).
    """

    def __init__(
        self,
        config: OcpConfig,
        spline: TrackSpline,
        params: VehicleParams,
        theta_hats,
        x_tilde=None,
        terminal: str = "equality",
        x_f=None,
        slack: bool = True,
        horizon: Optional[int] = None,
        width: Optional[float] = None,
    ):
        N = config.N if horizon is None else int(horizon)
        if N < 1:
            raise ValueError("horizon must be positive")
        if terminal not in TERMINAL_KINDS:
            raise ValueError(f"terminal must be one of {TERMINAL_KINDS}")
        theta_hats = np.asarray(theta_hats, dtype=float)
        if theta_hats.shape != (N + 1,):
            raise ValueError(f"need {N + 1} linearization progresses, got {theta_hats.shape}")
        if terminal != "none":
            if x_f is None or np.shape(x_f) != (NX,):
                raise ValueError("terminal target must be a 9-vector")
            x_f = np.asarray(x_f, dtype=float)
        if x_tilde is not None:
            x_tilde = np.asarray(x_tilde, dtype=float)
            if x_tilde.shape != (NX,):
                raise ValueError("x_tilde must be a 9-vector")
        self.config = config
        self.spline = spline
        self.params = params
        self.N = N
        self.dt = float(config.dt)
        self.theta_hats = theta_hats
        self.x_tilde = x_tilde
        self.terminal = terminal
        self.x_f = x_f
        self.slack = slack
        self.width = float(spline.width if width is None else width)
        if not self.width > 0:
            raise ValueError("track width must be positive")
        self.layout = Layout(N, slack)
        self.n = self.layout.n

        self._n_init = NX if x_tilde is not None else 0
        self._n_term_g = NX if terminal in ("equality", "periodic") else 0
        self.n_g = self._n_init + NX * N + self._n_term_g
        self._stage_h = 8 + (2 if slack else 1) + (2 if config.bound_dtheta else 0)
        self._n_term_h = 1 if terminal == "ball" else 0
        self.n_h = self._stage_h * N + self._n_term_h

        self._build_cost()
        self._build_patterns()

    # -- cost -------------------------------------------------------------
    def _build_cost(self) -> None:
        """Least-squares residual ``r(y) = J_r y + r_0``; affine given theta_hat."""
        c, N, L = self.config, self.N, self.layout
        px, py, dx, dy = self.spline.eval_center(self.theta_hats[:N])
        th = self.theta_hats[:N]
        rows, cols, vals = [], [], []
        r0 = np.zeros(5 * N)
        for i in range(N):
            xo, uo, k = NX * i, L.u0 + NU * i, 5 * i
            # e_C = dy*(p_x - px) - dx*(p_y - py); theta terms cancel
            rows += [k, k]
            cols += [xo + PX, xo + PY]
            vals += [c.q_C * dy[i], -c.q_C * dx[i]]
            r0[k] = c.q_C * (-dy[i] * px[i] + dx[i] * py[i])
            # e_L = dx*(p_x - px) + dy*(p_y - py) - (dx^2 + dy^2)(theta - th)
            s2 = dx[i] ** 2 + dy[i] ** 2
            rows += [k + 1] * 3
            cols += [xo + PX, xo + PY, xo + THETA]
            vals += [c.q_L * dx[i], c.q_L * dy[i], -c.q_L * s2]
            r0[k + 1] = c.q_L * (-dx[i] * px[i] - dy[i] * py[i] + s2 * th[i])
            rows += [k + 2, k + 3, k + 4]
            cols += [uo + DTAU, uo + DDELTA, uo + DTHETA]
            vals += [c.q_dtau, c.q_ddelta, c.q_dtheta]
            r0[k + 4] = -c.q_dtheta * c.v_bar
        self._Jr = sp.csr_matrix((vals, (rows, cols)), shape=(5 * N, self.n))
        self._r0 = r0
        self._lin = np.zeros(self.n)
        if self.slack:
            self._lin[L.xi0:] = c.mu
        self._H_cost = (2.0 * (self._Jr.T @ self._Jr)).tocsr()
        reg = np.full(self.n, c.eps_reg + c.prox)
        if self.slack:
            reg[L.xi0:] += c.slack_reg
        self._M = (self._H_cost + sp.diags(reg)).tocsr()

    def residuals(self, y) -> np.ndarray:
        return self._Jr @ np.asarray(y, dtype=float) + self._r0

    def objective(self, y) -> float:
        r = self.residuals(y)
        return float(r @ r + self._lin @ y)

    def gradient(self, y) -> np.ndarray:
        return 2.0 * (self._Jr.T @ self.residuals(y)) + self._lin

    # -- constraints ------------------------------------------------------
    def _bound_rows(self, xs, us) -> np.ndarray:
        c = self.config
        N = self.N
        tau, delta = xs[:N, TAU], xs[:N, DELTA]
        cols = [
            tau - c.tau_max, c.tau_min - tau,
            delta - c.delta_max, c.delta_min - delta,
            us[:, DTAU] - c.dtau_max, c.dtau_min - us[:, DTAU],
            us[:, DDELTA] - c.ddelta_max, c.ddelta_min - us[:, DDELTA],
        ]
        return np.stack(cols, axis=1)

    def _track(self, xs):
        """Track function value and centerline data at stages 0..N-1."""
        s = self.spline
        x = xs[: self.N]
        px, py, dx, dy = s.eval_center(x[:, THETA])
        ex, ey = x[:, PX] - px, x[:, PY] - py
        pi = ex**2 + ey**2 - (0.5 * self.width) ** 2
        return pi, ex, ey, dx, dy

    def _terminal_delta(self, xs) -> np.ndarray:
        if self.terminal == "periodic":
            return xs[self.N] - xs[0] - self.x_f
        return xs[self.N] - self.x_f

    def constraints(self, y) -> tuple[np.ndarray, np.ndarray]:
        xs, us, xis = self.layout.split(y)
        parts = []
        if self.x_tilde is not None:
            parts.append(xs[0] - self.x_tilde)
        parts.append((xs[1:] - rk4_step(xs[:-1], us, self.params, self.dt)).ravel())
        if self._n_term_g:
            parts.append(self._terminal_delta(xs))
        g = np.concatenate(parts)

        pi = self._track(xs)[0]
        stage = [self._bound_rows(xs, us)]
        if self.slack:
            stage.append(np.stack([pi - xis, -xis], axis=1))
        else:
            stage.append(pi[:, None])
        if self.config.bound_dtheta:
            d = us[:, DTHETA]
            stage.append(np.stack([d - self.config.dtheta_max, self.config.dtheta_min - d], axis=1))
        h = np.concatenate(stage, axis=1).ravel()
        if self._n_term_h:
            e = self._terminal_delta(xs)
            ball = np.dot(self.config.terminal_weights, e**2) - self.config.r_f**2
            h = np.append(h, ball)
        return g, h

    def track_row(self, i: int) -> int:
        """Index in ``h`` of the (soft) track row of stage ``i``."""
        return self._stage_h * i + 8

    # -- derivatives ------------------------------------------------------
    def _build_patterns(self) -> None:
        N, L = self.N, self.layout
        # equality Jacobian: constant identity parts + A/B blocks
        rows, cols, vals = [], [], []
        r = 0
        if self.x_tilde is not None:
            rows += list(range(NX))
            cols += list(range(NX))
            vals += [1.0] * NX
            r = NX
        self._dyn_row0 = r
        for i in range(N):
            rows += list(range(r + NX * i, r + NX * (i + 1)))
            cols += list(range(NX * (i + 1), NX * (i + 2)))
            vals += [1.0] * NX
        rt = r + NX * N
        if self._n_term_g:
            rows += list(range(rt, rt + NX))
            cols += list(range(NX * N, NX * (N + 1)))
            vals += [1.0] * NX
            if self.terminal == "periodic":
                rows += list(range(rt, rt + NX))
                cols += list(range(NX))
                vals += [-1.0] * NX
        self._Jg_const = (np.array(rows), np.array(cols), np.array(vals))
        i_idx = np.arange(N)
        rr, cc = np.meshgrid(np.arange(NX), np.arange(NX), indexing="ij")
        self._A_rows = (r + NX * i_idx[:, None, None] + rr[None]).ravel()
        self._A_cols = (NX * i_idx[:, None, None] + cc[None]).ravel()
        rr, cc = np.meshgrid(np.arange(NX), np.arange(NU), indexing="ij")
        self._B_rows = (r + NX * i_idx[:, None, None] + rr[None]).ravel()
        self._B_cols = (L.u0 + NU * i_idx[:, None, None] + cc[None]).ravel()

        # inequality Jacobian: constant bound parts
        c = self.config
        rows, cols, vals = [], [], []
        for i in range(N):
            b = self._stage_h * i
            xo, uo = NX * i, L.u0 + NU * i
            for k, (col, sgn) in enumerate(((xo + TAU, 1), (xo + TAU, -1), (xo + DELTA, 1), (xo + DELTA, -1),
                                            (uo + DTAU, 1), (uo + DTAU, -1), (uo + DDELTA, 1), (uo + DDELTA, -1))):
                rows.append(b + k)
                cols.append(col)
                vals.append(float(sgn))
            k = 9
            if self.slack:
                rows += [b + 8, b + 9]
                cols += [L.xi(i), L.xi(i)]
                vals += [-1.0, -1.0]
                k = 10
            if c.bound_dtheta:
                rows += [b + k, b + k + 1]
                cols += [uo + DTHETA, uo + DTHETA]
                vals += [1.0, -1.0]
        self._Jh_const = (np.array(rows), np.array(cols), np.array(vals))
        self._pi_rows = np.repeat(self._stage_h * i_idx + 8, 3)
        self._pi_cols = (NX * i_idx[:, None] + np.array([PX, PY, THETA])[None]).ravel()

    def jacobians(self, y, _AB=None):
        """Sparse ``(Jg, Jh)`` with one row per constraint."""
        xs, us, _ = self.layout.split(y)
        A, B = _AB if _AB is not None else dynamics_jacobians(xs[:-1], us, self.params, self.dt)
        r0, c0, v0 = self._Jg_const
        Jg = sp.csr_matrix(
            (np.concatenate([v0, -A.ravel(), -B.ravel()]),
             (np.concatenate([r0, self._A_rows, self._B_rows]),
              np.concatenate([c0, self._A_cols, self._B_cols]))),
            shape=(self.n_g, self.n),
        )
        pi, ex, ey, dx, dy = self._track(xs)
        gp = np.stack([2 * ex, 2 * ey, -2 * (ex * dx + ey * dy)], axis=1).ravel()
        r1, c1, v1 = self._Jh_const
        rows = [r1, self._pi_rows]
        cols = [c1, self._pi_cols]
        vals = [v1, gp]
        if self._n_term_h:
            e = self._terminal_delta(xs)
            rows.append(np.full(NX, self.n_h - 1))
            cols.append(np.arange(NX * self.N, NX * (self.N + 1)))
            vals.append(2.0 * np.asarray(self.config.terminal_weights) * e)
        Jh = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_h, self.n),
        )
        return Jg, Jh

    def _stage_index(self) -> np.ndarray:
        """Positions of ``(x_i, u_i)`` in ``y`` for each stage, shape (N, 12)."""
        N, L = self.N, self.layout
        return np.concatenate(
            [NX * np.arange(N)[:, None] + np.arange(NX)[None], L.u0 + NU * np.arange(N)[:, None] + np.arange(NU)[None]],
            axis=1,
        )

    def curvature_blocks(self, y, lam, mu, _H_dyn=None) -> np.ndarray:
        """Stage blocks of the constraint part of the Lagrangian Hessian.

        Block ``i`` covers ``(x_i, u_i)`` and holds the dynamics curvature
        weighted by the multipliers plus the track constraint curvature.
        """
        xs, us, _ = self.layout.split(y)
        lam = np.asarray(lam, dtype=float)
        mu = np.asarray(mu, dtype=float)
        N = self.N
        lam_dyn = lam[self._dyn_row0: self._dyn_row0 + NX * N].reshape(N, NX)
        Hd = _H_dyn if _H_dyn is not None else dynamics_hessians(xs[:-1], us, -lam_dyn, self.params, self.dt)
        Hd = np.array(Hd)
        m_pi = mu[self._stage_h * np.arange(N) + 8]
        if np.any(m_pi != 0):
            th = xs[:N, THETA]
            _, ex, ey, dx, dy = self._track(xs)
            dd = self.spline.curvature_vector(th)
            hxx = 2.0 * m_pi
            hxt = -2.0 * m_pi * dx
            hyt = -2.0 * m_pi * dy
            htt = 2.0 * m_pi * (dx**2 + dy**2 - ex * dd[:, 0] - ey * dd[:, 1])
            Hd[:, PX, PX] += hxx
            Hd[:, PY, PY] += hxx
            Hd[:, PX, THETA] += hxt
            Hd[:, THETA, PX] += hxt
            Hd[:, PY, THETA] += hyt
            Hd[:, THETA, PY] += hyt
            Hd[:, THETA, THETA] += htt
        return Hd

    def _assemble(self, blocks: np.ndarray, mu) -> sp.csr_matrix:
        idx = self._stage_index()
        rows = [np.repeat(idx, NX + NU, axis=1).ravel()]
        cols = [np.tile(idx, (1, NX + NU)).ravel()]
        vals = [blocks.ravel()]
        if self._n_term_h and mu is not None and mu[-1] != 0:
            j = np.arange(NX * self.N, NX * (self.N + 1))
            rows.append(j)
            cols.append(j)
            vals.append(2.0 * mu[-1] * np.asarray(self.config.terminal_weights))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n, self.n),
        )

    def hessian_M(self, y=None, lam=None, mu=None, _blocks=None):
        """Positive definite QP Hessian.

        Gauss-Newton cost Hessian plus diagonal regularization; with
        ``qp_hessian == "projected"`` and multipliers given, also the
        stage-wise projection of :meth:`curvature_blocks` onto the PSD cone.
        """
        c = self.config
        if c.qp_hessian == "gauss_newton" or lam is None or mu is None:
            return self._M
        blocks = _blocks if _blocks is not None else self.curvature_blocks(y, lam, mu)
        w, V = np.linalg.eigh(0.5 * (blocks + np.swapaxes(blocks, 1, 2)))
        psd = np.einsum("nij,nj,nkj->nik", V, np.maximum(w, 0.0), V)
        return (self._M + self._assemble(psd, mu)).tocsr()

    def hessian_P(self, y, lam, mu, _H_dyn=None, _blocks=None):
        """Hessian of ``f + lam'g + mu'h`` (or Gauss-Newton, per config)."""
        prox = sp.identity(self.n, format="csr") * self.config.prox
        if self.config.hessian == "gauss_newton":
            return (self._H_cost + prox).tocsr()
        blocks = _blocks if _blocks is not None else self.curvature_blocks(y, lam, mu, _H_dyn)
        mu = np.asarray(mu, dtype=float)
        return (self._H_cost + self._assemble(blocks, mu) + prox).tocsr()

    def elimination(self, y, _AB=None) -> Elimination:
        """Null-space basis of the initial-condition and dynamics rows.

        Reduced variables are ``(x_0 if free, u_0..u_{N-1}, xi)``; states
        follow by propagating ``dx_{i+1} = A_i dx_i + B_i du_i``.
        """
        xs, us, _ = self.layout.split(y)
        A, B = _AB if _AB is not None else dynamics_jacobians(xs[:-1], us, self.params, self.dt)
        N, L, n = self.N, self.layout, self.n
        free = self.x_tilde is None
        nx0 = NX if free else 0
        nr = nx0 + NU * N + (N if self.slack else 0)
        Z = np.zeros((n, nr))
        Z[L.u0:, nx0:] = np.eye(n - L.u0)
        S = np.zeros((NX, nr))
        if free:
            S[:, :NX] = np.eye(NX)
        Z[0:NX] = S
        m1 = self._n_init + NX * N
        Y = np.zeros((n, m1))
        Phi = np.zeros((NX, m1))
        if not free:
            Phi[:, :NX] = np.eye(NX)
        Y[0:NX] = Phi
        r = self._dyn_row0
        for i in range(N):
            S = A[i] @ S
            S[:, nx0 + NU * i: nx0 + NU * (i + 1)] += B[i]
            Z[NX * (i + 1): NX * (i + 2)] = S
            Phi = A[i] @ Phi
            Phi[:, r + NX * i: r + NX * (i + 1)] += np.eye(NX)
            Y[NX * (i + 1): NX * (i + 2)] = Phi
        return Elimination(np.arange(m1), Z, Y)

    def linearize(self, y, lam=None, mu=None, with_P: bool = True):
        """All outer-iteration quantities at ``y`` with one Jacobian evaluation."""
        xs, us, _ = self.layout.split(y)
        AB = dynamics_jacobians(xs[:-1], us, self.params, self.dt)
        Jg, Jh = self.jacobians(y, _AB=AB)
        P = None
        M = self._M
        if with_P or (lam is not None and mu is not None):
            lam = np.zeros(self.n_g) if lam is None else np.asarray(lam, dtype=float)
            mu = np.zeros(self.n_h) if mu is None else np.asarray(mu, dtype=float)
            blocks = self.curvature_blocks(y, lam, mu)
            M = self.hessian_M(y, lam, mu, _blocks=blocks)
            if with_P:
                P = self.hessian_P(y, lam, mu, _blocks=blocks)
        return Linearization(
            grad=self.gradient(y), Jg=Jg, Jh=Jh, M=M, P=P,
            elimination=self.elimination(y, _AB=AB),
        )

    # -- helpers ----------------------------------------------------------
    def rollout_guess(self, x0, us, xis=None) -> np.ndarray:
        """Decision vector from a nominal forward simulation."""
        us = np.asarray(us, dtype=float)
        xs = np.empty((self.N + 1, NX))
        xs[0] = x0
        for i in range(self.N):
            xs[i + 1] = rk4_step(xs[i], us[i], self.params, self.dt)
        return self.layout.pack(xs, us, xis)


@dataclass
class Linearization:
    grad: np.ndarray
    Jg: Any
    Jh: Any
    M: Any
    P: Any
    elimination: Optional[Elimination] = None


def build_nlp(
    config: OcpConfig,
    spline: TrackSpline,
    params: VehicleParams,
    x_tilde,
    theta_hats,
    terminal_target,
) -> TrajectoryNlp:
    """The receding-horizon problem at measured state ``x_tilde``.

    ``r_f == 0`` gives an exact terminal state; ``r_f > 0`` a weighted ball
    around it.
    """
    kind = "ball" if config.r_f > 0 else "equality"
    return TrajectoryNlp(config, spline, params, theta_hats, x_tilde=x_tilde,
                         terminal=kind, x_f=terminal_target, slack=True)


class CallableNlp:
    """Small dense NLP from ``jax``-traceable ``f``, ``g`` and ``h``.

    Used for toy problems and tests; derivatives come from automatic
    differentiation.  ``M`` defaults to the identity.  ``prox`` adds
    ``prox * I`` to ``P``; the shift vanishes at outer fixed points but keeps
    each outer step short when the start is far from a solution.
    """

    def __init__(self, n: int, f, g=None, h=None, M=None, prox: float = 0.0):
        self.n = n
        self.prox = float(prox)
        self._f = jax.jit(f)
        self._grad = jax.jit(jax.grad(f))
        zero = lambda y: jnp.zeros(0)  # noqa: E731
        self._g = jax.jit(g or zero)
        self._h = jax.jit(h or zero)
        self._Jg = jax.jit(jax.jacfwd(g or zero))
        self._Jh = jax.jit(jax.jacfwd(h or zero))

        def lagr(y, lam, mu):
            return f(y) + jnp.dot(lam, (g or zero)(y)) + jnp.dot(mu, (h or zero)(y))

        self._hess = jax.jit(jax.hessian(lagr))
        y0 = jnp.zeros(n)
        self.n_g = int(self._g(y0).shape[0])
        self.n_h = int(self._h(y0).shape[0])
        self._M = np.eye(n) if M is None else np.asarray(M, dtype=float)

    def objective(self, y) -> float:
        return float(self._f(jnp.asarray(y)))

    def gradient(self, y) -> np.ndarray:
        return np.asarray(self._grad(jnp.asarray(y)))

    def constraints(self, y):
        y = jnp.asarray(y)
        return np.asarray(self._g(y)), np.asarray(self._h(y))

    def jacobians(self, y):
        y = jnp.asarray(y)
        return np.asarray(self._Jg(y)).reshape(self.n_g, self.n), np.asarray(self._Jh(y)).reshape(self.n_h, self.n)

    def hessian_M(self, y=None):
        return self._M

    def hessian_P(self, y, lam, mu):
        H = np.asarray(self._hess(jnp.asarray(y), jnp.asarray(lam, dtype=float), jnp.asarray(mu, dtype=float)))
        return H + self.prox * np.eye(self.n)

    def elimination(self, y):
        return None

    def linearize(self, y, lam=None, mu=None, with_P: bool = True):
        Jg, Jh = self.jacobians(y)
        P = None
        if with_P:
            lam = np.zeros(self.n_g) if lam is None else lam
            mu = np.zeros(self.n_h) if mu is None else mu
            P = self.hessian_P(y, lam, mu)
        return Linearization(self.gradient(y), Jg, Jh, self._M, P, None)
