import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fsqp_mpcc.fsqp import (
    Iterate, Mode, SolverSettings, Status, certificate, constraint_violation, full_solve,
    perturbed_gradient, perturbed_stationarity, rti_solve, run, solve,
)
from fsqp_mpcc.ocp import CallableNlp
from toys import corpus

TIGHT = SolverSettings(inner_max=100, eps_tol=1e-10, full_i_max=200, full_eps_tol=1e-10)


def test_constraint_violation_examples():
    assert constraint_violation(np.zeros(3), -np.ones(2)) == 0.0
    assert constraint_violation([0.0, 0.0], [-1.0, 0.5]) == pytest.approx(0.5)
    assert constraint_violation([0.3, -0.4], [0.5, -2.0]) == pytest.approx(np.sqrt(0.5), abs=1e-15)
    assert constraint_violation([], []) == 0.0


@settings(max_examples=100)
@given(st.lists(st.floats(-1e3, 1e3), max_size=8), st.lists(st.floats(-1e3, 1e3), max_size=8))
def test_cv_bounds_certificate(g, h):
    cv = constraint_violation(g, h)
    c = certificate(g, h)
    assert cv >= 0.0
    # the 2-norm dominates the max-norm and is at most sqrt(m) times it
    assert cv >= max(c, 0.0) - 1e-9
    assert cv <= np.sqrt(len(g) + len(h)) * max(c, 0.0) + 1e-9


def test_perturbed_gradient():
    P = np.array([[2.0, 1.0], [1.0, 3.0]])
    a = perturbed_gradient([1.0, -1.0], P, [0.0, 0.0], [1.0, 1.0])
    np.testing.assert_allclose(a, [4.0, 3.0])


@pytest.mark.parametrize("toy", corpus(), ids=lambda t: t.name)
def test_toy_converges_to_known_solution(toy):
    res = solve(toy.nlp, Iterate.cold(toy.nlp, toy.y0), TIGHT, i_max=200)
    assert res.status is Status.CONVERGED
    np.testing.assert_allclose(res.iterate.y, toy.y_star, atol=toy.tol)
    assert perturbed_stationarity(toy.nlp, res) <= 1e-6
    assert res.certificate <= 1e-9


@pytest.mark.parametrize("toy", corpus(), ids=lambda t: t.name)
def test_single_outer_iteration_is_feasible(toy):
    res = solve(toy.nlp, Iterate.cold(toy.nlp, toy.y0), TIGHT, i_max=1)
    assert res.status is Status.FEASIBLE_SUBOPTIMAL
    g, h = toy.nlp.constraints(res.iterate.y)
    assert constraint_violation(g, h) <= 1e-6


@pytest.mark.parametrize("toy", corpus(), ids=lambda t: t.name)
def test_full_solve_agrees(toy):
    res = full_solve(toy.nlp, Iterate.cold(toy.nlp, toy.y0), TIGHT)
    assert res.status is Status.CONVERGED
    np.testing.assert_allclose(res.iterate.y, toy.y_star, atol=toy.tol)


def test_objective_decreases_along_outer_iterations():
    toy = corpus()[0]
    res = solve(toy.nlp, Iterate.cold(toy.nlp, toy.y0), TIGHT, i_max=200)
    f = [r.objective for r in res.records]
    assert f[-1] <= f[0]
    assert all(r.cv <= 1e-9 for r in res.records)


def test_rti_is_one_sqp_step_and_not_feasible():
    toy = corpus()[0]
    init = Iterate.cold(toy.nlp, toy.y0)
    res = rti_solve(toy.nlp, init)
    assert res.status is Status.FEASIBLE_SUBOPTIMAL and len(res.records) == 1
    # the linearized constraint is met, the nonlinear one is not
    g, _ = toy.nlp.constraints(res.iterate.y)
    assert abs(g[0]) > 1e-3
    Jg, _ = toy.nlp.jacobians(init.y)
    g0, _ = toy.nlp.constraints(init.y)
    assert abs(g0[0] + Jg[0] @ (res.iterate.y - init.y)) < 1e-12


def test_failure_returns_initial_point():
    # x = 2 cannot satisfy x^2 <= -1: infeasible, so the input comes back unchanged
    nlp = CallableNlp(1, lambda y: y[0] ** 2, h=lambda y: jnp.array([y[0] ** 2 + 1.0]))
    init = Iterate.cold(nlp, [2.0])
    res = solve(nlp, init, SolverSettings())
    assert res.status is Status.FAILED and res.message
    np.testing.assert_array_equal(res.iterate.y, init.y)
    assert not res.ok


def test_inner_max_failure_is_reported():
    toy = corpus()[3]
    res = solve(toy.nlp, Iterate.cold(toy.nlp, toy.y0), SolverSettings(inner_max=1, eps_tol=1e-12))
    assert res.status is Status.FAILED
    assert res.message == "inner_max"


def test_full_solve_without_convergence_fails():
    toy = corpus()[0]
    res = full_solve(toy.nlp, Iterate.cold(toy.nlp, toy.y0), SolverSettings(full_i_max=2, inner_max=100))
    assert res.status is Status.FAILED


def test_mode_dispatch():
    toy = corpus()[1]
    init = Iterate.cold(toy.nlp, toy.y0)
    assert len(run(toy.nlp, init, SolverSettings(mode=Mode.RTI)).records) == 1
    assert run(toy.nlp, init, SolverSettings(mode="full", inner_max=100)).status is Status.CONVERGED
    assert run(toy.nlp, init, SolverSettings(mode="fsqp", inner_max=100)).ok


def test_settings_validation():
    with pytest.raises(ValueError):
        SolverSettings(i_max=0)
    with pytest.raises(ValueError):
        SolverSettings(eps_tol=0.0)
    with pytest.raises(ValueError):
        SolverSettings(mode="ipopt")
    s = SolverSettings(mode="rti", eps_tol=1e-7)
    assert SolverSettings.from_dict(s.to_dict()) == s


def test_stationarity_needs_outer_point():
    toy = corpus()[1]
    res = solve(toy.nlp, Iterate.cold(toy.nlp, [10.0, -10.0]), SolverSettings(inner_max=1))
    if res.outer is None:
        with pytest.raises(ValueError):
            perturbed_stationarity(toy.nlp, res)
