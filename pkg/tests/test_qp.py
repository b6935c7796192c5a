import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from fsqp_mpcc.qp import Elimination, QpData, QpSolver, QpStatus, kkt_residuals, solve_qp


def enumerate_active_sets(data: QpData):
    """Brute force: try every inequality subset, keep the KKT-consistent one.

    Returns ``(x, cond)`` with the condition number of the accepted KKT
    system, or ``(None, None)`` when no subset works (infeasible QP).
    """
    H, c = data.H, data.c
    n = len(c)
    A = np.zeros((0, n)) if data.A is None else data.A
    b = np.zeros(0) if data.b is None else data.b
    G = np.zeros((0, n)) if data.G is None else data.G
    d = np.zeros(0) if data.d is None else data.d
    me = len(b)
    for k in range(len(d) + 1):
        for S in itertools.combinations(range(len(d)), k):
            C = np.vstack([A, G[list(S)]])
            m = len(C)
            if m > n or (m and np.linalg.matrix_rank(C) < m):
                continue
            K = np.block([[H, C.T], [C, np.zeros((m, m))]])
            sol = np.linalg.solve(K, -np.concatenate([c, b, d[list(S)]]))
            x, mult = sol[:n], sol[n:]
            if np.all(G @ x + d <= 1e-9) and np.all(mult[me:] >= -1e-9):
                return x, np.linalg.cond(K)
    return None, None


def random_qp(rng):
    n = int(rng.integers(1, 11))
    me = int(rng.integers(0, min(n, 3))) if n > 1 else 0
    mi = int(rng.integers(0, 7))
    L = rng.standard_normal((n, n))
    H = L @ L.T + 0.1 * np.eye(n)
    A = rng.standard_normal((me, n)) if me else None
    G = rng.standard_normal((mi, n)) if mi else None
    return QpData(H, rng.standard_normal(n), A, rng.standard_normal(me) if me else None,
                  G, rng.standard_normal(mi) if mi else None)


def test_matches_brute_force_on_500_random_qps():
    rng = np.random.default_rng(0)
    checked = infeasible = skipped = 0
    while checked < 500:
        data = random_qp(rng)
        x, cond = enumerate_active_sets(data)
        if x is not None and cond > 1e6:
            # the enumeration oracle itself is only accurate to about cond * eps
            skipped += 1
            continue
        sol = solve_qp(data)
        checked += 1
        if x is None:
            infeasible += 1
            assert sol.status is QpStatus.INFEASIBLE
            continue
        assert sol.ok
        assert np.max(np.abs(sol.dy - x)) <= 1e-7
        assert max(kkt_residuals(data, sol).values()) <= 1e-8
    assert infeasible < 100 and skipped < 25


def test_warm_start_gives_same_solution(rng):
    for _ in range(50):
        data = random_qp(rng)
        cold = solve_qp(data)
        if not cold.ok:
            continue
        for ws in (cold.active, (), tuple(range(0 if data.G is None else len(data.d)))):
            warm = solve_qp(data, warm_start=ws)
            assert warm.ok
            np.testing.assert_allclose(warm.dy, cold.dy, atol=1e-9)
        again = solve_qp(data, warm_start=cold.active)
        assert again.iterations <= 1


def test_unconstrained_and_equality_only():
    H = np.diag([2.0, 4.0])
    c = np.array([-2.0, -4.0])
    sol = solve_qp(QpData(H, c))
    np.testing.assert_allclose(sol.dy, [1.0, 1.0])
    # min x^2 + 2 y^2 - 2x - 4y  s.t. x + y = 1 -> lam = 4/3, x = 1/3, y = 2/3
    sol = solve_qp(QpData(H, c, np.array([[1.0, 1.0]]), np.array([-1.0])))
    np.testing.assert_allclose(sol.dy, [1 / 3, 2 / 3], atol=1e-12)
    np.testing.assert_allclose(sol.lam, [4 / 3], atol=1e-12)


def test_simple_bound_multiplier():
    # min 0.5 x^2 - x  s.t. x <= 0.25: x = 0.25, mu = 0.75
    sol = solve_qp(QpData(np.eye(1), np.array([-1.0]), G=np.eye(1), d=np.array([-0.25])))
    assert sol.dy[0] == pytest.approx(0.25)
    assert sol.mu[0] == pytest.approx(0.75)
    assert sol.active == (0,)


def test_infeasible_detected():
    G = np.array([[1.0], [-1.0]])
    d = np.array([1.0, 1.0])  # x <= -1 and x >= 1
    assert solve_qp(QpData(np.eye(1), np.zeros(1), G=G, d=d)).status is QpStatus.INFEASIBLE


def test_sparse_inputs_and_elimination(rng):
    n, me, mi = 8, 3, 5
    L = rng.standard_normal((n, n))
    H = L @ L.T + np.eye(n)
    A = np.hstack([np.eye(me), rng.standard_normal((me, n - me))])
    G = rng.standard_normal((mi, n))
    c, b, d = rng.standard_normal(n), rng.standard_normal(me), rng.standard_normal(mi)
    ref = solve_qp(QpData(H, c, A, b, G, d))
    # explicit null-space basis of A = [I, R]: Z = [-R; I], Y = [I; 0]
    Z = np.vstack([-A[:, me:], np.eye(n - me)])
    Y = np.vstack([np.eye(me), np.zeros((n - me, me))])
    s = QpSolver(sp.csr_matrix(H), sp.csr_matrix(A), sp.csr_matrix(G), elimination=Elimination(np.arange(me), Z, Y))
    sol = s.solve(c, b, d)
    np.testing.assert_allclose(sol.dy, ref.dy, atol=1e-10)
    np.testing.assert_allclose(sol.lam, ref.lam, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_solution_satisfies_kkt(seed):
    data = random_qp(np.random.default_rng(seed))
    sol = solve_qp(data)
    if sol.ok:
        assert max(kkt_residuals(data, sol).values()) <= 1e-7


def test_bad_dimensions():
    with pytest.raises(ValueError):
        QpData(np.eye(2), np.zeros(3))
    with pytest.raises(ValueError):
        QpData(np.eye(2), np.zeros(2), A=np.eye(2))
