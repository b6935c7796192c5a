"""Dense strictly convex QP solver with warm-startable active sets.

Problems have the form::

    min  0.5 dy' H dy + c' dy
    s.t. A dy + b  = 0
         G dy + d <= 0

Equality constraints are removed by a null-space elimination, after which a
dual active-set method (Goldfarb-Idnani style) runs on the inequality
constraints.  All matrix work depends only on ``(H, A, G)`` and is done once
in :class:`QpSolver`; repeated solves with new vectors ``(c, b, d)`` only
touch the cached factorizations, which is what makes the frozen-derivative
inner iterations cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


@dataclass
class QpData:
    """Matrices and vectors of one QP instance."""

    H: np.ndarray
    c: np.ndarray
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    d: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        n = self.H.shape[0]
        if self.H.shape != (n, n) or np.shape(self.c) != (n,):
            raise ValueError("H must be n x n and c of length n")
        for M, v, name in ((self.A, self.b, "A"), (self.G, self.d, "G")):
            if (M is None) != (v is None):
                raise ValueError(f"{name} and its vector must be given together")
            if M is not None and (M.shape[1] != n or M.shape[0] != np.shape(v)[0]):
                raise ValueError(f"{name} has inconsistent dimensions")


@dataclass
class QpSolution:
    dy: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    status: QpStatus
    active: tuple[int, ...] = ()
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status is QpStatus.OPTIMAL


@dataclass
class Elimination:
    """Structured null-space basis for a subset of the equality rows.

    ``A[rows] @ Z == 0`` and ``A[rows] @ Y == I``.  Problems with a
    recursive (dynamics-chain) structure supply this to avoid a dense QR
    of the full equality Jacobian.
    """

    rows: np.ndarray
    Z: np.ndarray
    Y: np.ndarray = field(repr=False)


def _dense(M):
    return M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)


class _Gram:
    """Columns of ``K = Gr Hr^-1 Gr'`` computed on demand and cached.

    Dual active-set iterations only touch the columns of constraints that
    enter the working set, so forming all of ``K`` up front is wasted work
    when there are many inequalities.
    """

    def __init__(self, Gr: np.ndarray, chol):
        self.Gr = Gr
        self.chol = chol
        self.m = Gr.shape[0]
        self._pos = np.full(self.m, -1)
        nr = Gr.shape[1]
        self._HiGt = np.empty((nr, 0))
        self._K = np.empty((self.m, 0))

    def _ensure(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=int).ravel()
        missing = np.unique(idx[self._pos[idx] < 0])
        if missing.size:
            if self.chol is None:
                hg = np.zeros((0, missing.size))
            else:
                hg = sla.cho_solve(self.chol, self.Gr[missing].T, check_finite=False)
            kc = self.Gr @ hg
            self._pos[missing] = self._K.shape[1] + np.arange(missing.size)
            self._HiGt = np.hstack([self._HiGt, hg])
            self._K = np.hstack([self._K, kc])
        return self._pos[idx]

    def cols(self, idx) -> np.ndarray:
        """``K[:, idx]``."""
        pos = self._ensure(idx)
        return self._K[:, pos]

    def hi_gt(self, idx) -> np.ndarray:
        """``Hr^-1 Gr[idx]'``."""
        pos = self._ensure(idx)
        return self._HiGt[:, pos]

    def block(self, W) -> np.ndarray:
        B = self.cols(W)[np.asarray(W, dtype=int)]
        return 0.5 * (B + B.T)

    def full(self) -> np.ndarray:
        return self.cols(np.arange(self.m)) if self.m else np.zeros((0, 0))


class QpSolver:
    """Factorization cache for QPs sharing ``(H, A, G)``.

    A solver instance is stateful and not thread-safe; use one per thread.
    """

    def __init__(
        self,
        H,
        A=None,
        G=None,
        elimination: Optional[Elimination] = None,
        tol: float = 1e-8,
        max_iter: int = 1000,
        refine: bool = True,
    ):
        self.tol = tol
        self.refine = refine
        self.max_iter = max_iter
        self.H = H
        n = H.shape[0]
        self.n = n
        self.A = A
        self.m_eq = 0 if A is None else A.shape[0]
        self.G = G if G is not None else np.zeros((0, n))
        self.m_in = self.G.shape[0]

        all_rows = np.arange(self.m_eq)
        if elimination is not None:
            rows1 = np.asarray(elimination.rows, dtype=int)
            Z1 = np.asarray(elimination.Z)
            Y1 = np.asarray(elimination.Y)
        else:
            rows1 = np.zeros(0, dtype=int)
            Z1 = None
            Y1 = None
        rest = np.setdiff1d(all_rows, rows1)
        self._rows1, self._rest = rows1, rest
        self._Z1, self._Y1 = Z1, Y1

        m2 = len(rest)
        self._A2 = _dense(A)[rest] if m2 else None
        if m2:
            A2Z = self._A2 if Z1 is None else self._A2 @ Z1
            Q, R = np.linalg.qr(A2Z.T, mode="complete")
            diag = np.abs(np.diag(R))
            if diag.size and diag.min() <= 1e-12 * max(1.0, diag.max()):
                raise np.linalg.LinAlgError("equality constraints are rank deficient")
            self._Q1 = Q[:, :m2]
            self._R = R[:m2]
            self._Y2 = sla.solve_triangular(self._R, self._Q1.T, lower=False).T
            Z2 = Q[:, m2:]
            Z = Z2 if Z1 is None else Z1 @ Z2
            self._A2Y1 = None if Y1 is None else self._A2 @ Y1
        else:
            Z = Z1 if Z1 is not None else None
        self._Z = Z

        # reduced Hessian H_r = Z' H Z
        if Z is None:
            Hr = _dense(H)
            Gr = _dense(self.G)
        else:
            Hr = Z.T @ (H @ Z)
            Gr = np.asarray(self.G @ Z)
        Hr = 0.5 * (Hr + Hr.T)
        self._Hr = Hr
        self.n_reduced = Hr.shape[0]
        if self.n_reduced:
            self._chol = sla.cho_factor(Hr, lower=True, check_finite=False)
            if not np.all(np.diag(self._chol[0]) > 0):
                raise np.linalg.LinAlgError("reduced Hessian is not positive definite")
        else:
            self._chol = None
        self._Gr = Gr
        self._gram = _Gram(Gr, self._chol)
        # working sets tend to repeat across calls that share this solver
        self._kcache: dict = {}
        self._kkt_cache: dict = {}

    @property
    def K(self) -> np.ndarray:
        """Dual Hessian ``Gr Hr^-1 Gr'`` (formed in full on request)."""
        return self._gram.full()

    # -- helpers ---------------------------------------------------------
    def _expand(self, v: np.ndarray) -> np.ndarray:
        return v if self._Z is None else self._Z @ v

    def _particular(self, b: Optional[np.ndarray]) -> np.ndarray:
        dy = np.zeros(self.n)
        if self.m_eq == 0:
            return dy
        b = np.asarray(b, dtype=float)
        if len(self._rows1):
            dy -= self._Y1 @ b[self._rows1]
        if len(self._rest):
            w = -self._Y2 @ (b[self._rest] + self._A2 @ dy)
            dy += w if self._Z1 is None else self._Z1 @ w
        return dy

    def _eq_multipliers(self, r: np.ndarray) -> np.ndarray:
        lam = np.zeros(self.m_eq)
        lam2 = None
        if len(self._rest):
            rz = r if self._Z1 is None else self._Z1.T @ r
            lam2 = -sla.solve_triangular(self._R, self._Q1.T @ rz, lower=False)
            lam[self._rest] = lam2
        if len(self._rows1):
            lam1 = -self._Y1.T @ r
            if lam2 is not None:
                lam1 -= self._A2Y1.T @ lam2
            lam[self._rows1] = lam1
        return lam

    # -- main entry ------------------------------------------------------
    def solve(self, c, b=None, d=None, warm_start: Optional[Iterable[int]] = None) -> QpSolution:
        c = np.asarray(c, dtype=float)
        d = np.zeros(0) if d is None else np.asarray(d, dtype=float)
        dy_p = self._particular(b)
        cp = c + self.H @ dy_p
        cr = cp if self._Z is None else self._Z.T @ cp
        v0 = -sla.cho_solve(self._chol, cr, check_finite=False) if self.n_reduced else np.zeros(0)
        s0 = self._Gr @ v0 + d + self.G @ dy_p

        mu, active, status, iters = _dual_active_set(
            self._gram, s0, self.tol, self.max_iter, warm_start, self._kcache
        )
        v = None
        if status is QpStatus.OPTIMAL and active:
            if self.refine:
                refined = self._refine(cr, d + self.G @ dy_p, active)
                if refined is not None:
                    v, mu = refined
            if v is None:
                mu = _polish(self._gram, s0, active, mu, self._kcache)
        if v is None:
            supp = np.flatnonzero(mu)
            v = v0 - self._gram.hi_gt(supp) @ mu[supp] if supp.size else v0
        dy = dy_p + self._expand(v)
        lam = np.zeros(self.m_eq)
        if self.m_eq:
            r = self.H @ dy + c + self.G.T @ mu
            lam = self._eq_multipliers(np.asarray(r).ravel())
        return QpSolution(dy, lam, mu, status, tuple(int(i) for i in active), iters)


    def _refine(self, cr, dr, W):
        """Solve the reduced equality QP on the final working set directly.

        Going through ``K`` squares the conditioning of the constraint rows;
        the saddle-point system does not.
        """
        W = list(W)
        nr, key = self.n_reduced, tuple(W)
        lu = self._kkt_cache.get(key)
        if lu is None:
            k = len(W)
            Gw = self._Gr[W]
            kkt = np.zeros((nr + k, nr + k))
            kkt[:nr, :nr] = self._Hr
            kkt[:nr, nr:] = Gw.T
            kkt[nr:, :nr] = Gw
            with np.errstate(all="ignore"):
                lu = sla.lu_factor(kkt, check_finite=False)
            if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0.0:
                lu = "singular"
            if len(self._kkt_cache) > 64:
                self._kkt_cache.clear()
            self._kkt_cache[key] = lu
        if isinstance(lu, str):
            return None
        sol = sla.lu_solve(lu, -np.concatenate([cr, dr[W]]), check_finite=False)
        mu_w = sol[nr:]
        if not np.all(np.isfinite(sol)) or mu_w.min() < 0:
            return None
        mu = np.zeros(self.m_in)
        mu[W] = mu_w
        return sol[:nr], mu


def _factor(K: _Gram, W: Sequence[int], cache: Optional[dict] = None):
    if not W:
        return None
    key = tuple(W)
    if cache is not None and key in cache:
        return cache[key]
    try:
        fac = sla.cho_factor(K.block(W), lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        fac = "singular"
    if cache is not None:
        if len(cache) > 256:
            cache.clear()
        cache[key] = fac
    return fac


def _polish(K, s0, W, mu, cache=None):
    """Re-solve the final working set in one shot to shed accumulated error."""
    fac = _factor(K, W, cache)
    if isinstance(fac, str):
        return mu
    lw = sla.cho_solve(fac, s0[W], check_finite=False)
    if lw.min() < 0:
        return mu
    out = np.zeros_like(mu)
    out[W] = lw
    return out


def _dual_active_set(K, s0, tol, max_iter, warm_start, cache=None):
    """Dual active-set iterations on ``s(mu) = s0 - K mu``.

    ``s`` holds the inequality values ``G dy + d`` at the primal point that
    corresponds to multipliers ``mu``.  Returns ``(mu, W, status, iters)``.
    """
    m = len(s0)
    mu = np.zeros(m)
    W: list[int] = []
    if warm_start:
        W = sorted({int(i) for i in warm_start if 0 <= int(i) < m})
        while W:
            fac = _factor(K, W, cache)
            if isinstance(fac, str):
                W = []
                break
            lw = sla.cho_solve(fac, s0[W], check_finite=False)
            if lw.min() >= 0:
                mu[W] = lw
                break
            W.pop(int(np.argmin(lw)))
    s = s0 - K.cols(W) @ mu[W] if W else s0.copy()

    iters = 0
    while True:
        p = int(np.argmax(s)) if m else -1
        if m == 0 or s[p] <= tol:
            return mu, W, QpStatus.OPTIMAL, iters
        if iters >= max_iter:
            return mu, W, QpStatus.MAX_ITER, iters
        iters += 1
        # raise the multiplier of p until p becomes active or a blocking
        # multiplier in W reaches zero
        while True:
            fac = _factor(K, W, cache)
            if isinstance(fac, str):
                return mu, W, QpStatus.INFEASIBLE, iters
            kp = K.cols([p])[:, 0]
            r = sla.cho_solve(fac, kp[W], check_finite=False) if W else np.zeros(0)
            kappa = kp[p] - (kp[W] @ r if W else 0.0)
            t_f = s[p] / kappa if kappa > 1e-12 * max(1.0, kp[p]) else np.inf
            t_d, k_block = np.inf, -1
            if W:
                pos = r > 1e-14
                if np.any(pos):
                    ratios = np.full(len(W), np.inf)
                    ratios[pos] = mu[W][pos] / r[pos]
                    k_block = int(np.argmin(ratios))
                    t_d = ratios[k_block]
            if not np.isfinite(t_f) and not np.isfinite(t_d):
                return mu, W, QpStatus.INFEASIBLE, iters
            t = min(t_f, t_d)
            if W:
                mu[W] = mu[W] - t * r
            mu[p] += t
            if t_f <= t_d:
                W.append(p)
                s = s0 - K.cols(W) @ mu[W]
                break
            drop = W.pop(k_block)
            mu[drop] = 0.0
            supp = W + [p]
            s = s0 - K.cols(supp) @ mu[supp]
            if iters >= max_iter:
                return mu, W, QpStatus.MAX_ITER, iters
            iters += 1
        mu[W] = np.maximum(mu[W], 0.0)


def solve_qp(
    data: QpData,
    warm_start: Optional[Iterable[int]] = None,
    tol: float = 1e-8,
    max_iter: int = 1000,
) -> QpSolution:
    """One-shot convenience wrapper around :class:`QpSolver`."""
    solver = QpSolver(data.H, data.A, data.G, tol=tol, max_iter=max_iter)
    return solver.solve(data.c, data.b, data.d, warm_start)


def kkt_residuals(data: QpData, sol: QpSolution) -> dict[str, float]:
    """Infinity-norm residuals of the KKT conditions at ``sol``."""
    H, c = data.H, data.c
    stat = H @ sol.dy + c
    out = {}
    if data.A is not None:
        stat = stat + data.A.T @ sol.lam
        out["primal_eq"] = float(np.max(np.abs(data.A @ sol.dy + data.b), initial=0.0))
    if data.G is not None:
        stat = stat + data.G.T @ sol.mu
        gs = data.G @ sol.dy + data.d
        out["primal_ineq"] = float(np.max(gs, initial=0.0))
        out["dual"] = float(max(0.0, -np.min(sol.mu, initial=0.0)))
        out["complementarity"] = float(np.max(np.abs(sol.mu * gs), initial=0.0))
    out["stationarity"] = float(np.max(np.abs(stat), initial=0.0))
    return out
