import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpmpc.gp import GpDataset, GpModel, SeKernel
from gpmpc.mpc import (MpcProblem, QuadraticCost, StateConstraint, dare, expected_cost,
                       input_box, lqr_gains, mean_rollout, receding_step, shift_solution, solve)
from gpmpc.prob import make_rng
from gpmpc.propagation import linear_nominal, rollout
from gpmpc.qp import QpInfeasible, solve_qp
from gpmpc.validate import check_expected_cost, check_warm_start, lqr_errors

A = np.array([[1.0, 0.1], [0.0, 1.0]])
B = np.array([[0.005], [0.1]])


def test_scalar_dare_golden_ratio():
    p, _ = dare(np.eye(1), np.eye(1), np.eye(1), np.eye(1))
    assert abs(p[0, 0] - (1 + math.sqrt(5)) / 2) <= 1e-10


def test_lqr_stabilises_double_integrator():
    k, _ = lqr_gains(A, B, np.eye(2), np.eye(1))
    assert np.max(np.abs(np.linalg.eigvals(A - B @ k))) < 1.0


def test_finite_horizon_gains_converge_to_dare():
    gains, _ = lqr_gains(A, B, np.eye(2), np.eye(1), horizon=300)
    k, _ = lqr_gains(A, B, np.eye(2), np.eye(1))
    assert np.allclose(gains[0], k, atol=1e-8)


def test_unconstrained_sqp_matches_riccati():
    assert lqr_errors(count=3) <= 1e-6


def test_qp_known_solution_and_infeasibility():
    r = solve_qp(np.eye(2), np.array([-1.0, -1.0]), np.array([[1.0, 1.0]]), np.array([1.0]))
    assert np.allclose(r.x, [0.5, 0.5])
    with pytest.raises(QpInfeasible):
        solve_qp(np.eye(1), np.zeros(1), np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]))


def _problem(**kw):
    nom = linear_nominal(A, B, np.eye(2), [0, 1])
    base = dict(constraints=[input_box([-1.0], [1.0])], kkt_tol=1e-8)
    base.update(kw)
    return MpcProblem(nom, 15, QuadraticCost(np.eye(2), np.eye(1) * 0.01, np.eye(2)), **base)


@given(st.floats(-3.0, 3.0), st.floats(-2.0, 2.0))
def test_solution_consistent_and_inputs_feasible(x0, v0):
    prob = _problem()
    sol = solve(prob, np.array([x0, v0]))
    assert np.all(np.abs(sol.input_means) <= 1.0 + 1e-8)
    xs = mean_rollout(prob, None, np.array([x0, v0]), sol.input_means, want_jac=False)
    xs = xs[0] if isinstance(xs, tuple) else xs
    assert np.allclose(xs, sol.state_means, atol=1e-10)


def test_soft_state_constraint_respected_when_feasible():
    prob = _problem(constraints=[input_box([-1.0], [1.0]),
                                 StateConstraint(np.array([[0.0, -1.0]]), np.array([0.5]))])
    sol = solve(prob, np.array([2.0, 0.0]))
    assert np.all(sol.state_means[1:, 1] >= -0.5 - 1e-6)


def test_soft_constraint_relaxes_when_infeasible():
    # velocity already far below the bound and inputs too weak to recover at once
    prob = _problem(constraints=[input_box([-0.1], [0.1]),
                                 StateConstraint(np.array([[0.0, -1.0]]), np.array([0.5]))])
    sol = solve(prob, np.array([0.0, -2.0]))
    assert np.all(np.isfinite(sol.input_means))
    assert np.all(sol.input_means >= -0.1 - 1e-8)
    assert np.allclose(sol.input_means[:5], 0.1, atol=1e-6)


def test_tightened_constraint_more_conservative_with_gp():
    v = make_rng(1).uniform(-2, 2, (20, 1))
    gp = GpModel([SeKernel(np.array([1.0]), 0.01)], [1e-4], GpDataset(v, 0 * v))
    k, _ = lqr_gains(A, B, np.eye(2), np.eye(1))
    nom = linear_nominal(A, B, np.array([[0.0], [1.0]]), [1])
    cons = [input_box([-1.0], [1.0]),
            StateConstraint(np.array([[0.0, -1.0]]), np.array([0.5]), level=0.9772)]
    cost = QuadraticCost(np.eye(2), np.eye(1) * 0.01, np.eye(2))
    plain = solve(MpcProblem(nom, 15, cost, constraints=cons), np.array([2.0, 0.0]))
    cautious = solve(MpcProblem(nom, 15, cost, constraints=cons, gp=gp, gains=k,
                                sigma_w=np.eye(1) * 1e-3), np.array([2.0, 0.0]))
    assert cautious.state_means[1:, 1].min() > plain.state_means[1:, 1].min() + 1e-3


def test_expected_cost_closed_form():
    ok, detail = check_expected_cost()
    assert ok, detail


def test_warm_start_saves_iterations():
    ok, detail = check_warm_start()
    assert ok, detail


def test_shift_solution_repeats_last_input():
    sol = solve(_problem(), np.array([1.0, 0.0]))
    sh = shift_solution(sol)
    assert np.array_equal(sh.input_means[:-1], sol.input_means[1:])
    assert np.array_equal(sh.input_means[-1], sol.input_means[-1])


def test_receding_step_returns_first_input():
    prob = _problem()
    u, sol = receding_step(prob, np.array([1.0, 0.0]))
    assert np.array_equal(u, sol.input_means[0])
    u2, _ = receding_step(prob, np.array([0.9, -0.1]), sol)
    assert u2.shape == (1,)


def test_problem_validation():
    nom = linear_nominal(A, B, np.eye(2), [0, 1])
    cost = QuadraticCost(np.eye(2), np.eye(1), np.eye(2))
    with pytest.raises(ValueError):
        MpcProblem(nom, 0, cost)
    with pytest.raises(ValueError):
        MpcProblem(nom, 5, cost, x_ref=np.zeros((3, 2)))
    with pytest.raises(ValueError):
        MpcProblem(nom, 5, cost, variance_mode="sometimes")


def test_expected_cost_adds_trace_terms():
    cost = QuadraticCost(np.eye(2) * 2.0, np.eye(1), np.eye(2))
    means = np.zeros((3, 2))
    covs = np.stack([np.eye(2) * 0.1] * 3)
    ucov = np.stack([np.eye(1) * 0.2] * 2)
    val = expected_cost(means, covs, np.zeros((2, 1)), ucov, np.zeros((3, 2)),
                        np.zeros((2, 1)), cost)
    assert val == pytest.approx(2 * 0.4 + 0.2 + 2 * 0.2)
