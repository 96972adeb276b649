"""Iterative shrinkage solver checked against closed forms and a second solver."""

import numpy as np
import pytest

from unrollpr.baselines import LassoProblem, cd_lasso, ista_solve, power_iteration_sq
from unrollpr.field import SeededRng
from unrollpr.network import soft_threshold


def _random_problem(seed, m=8, n=16, lam=0.1):
    rng = SeededRng(seed)
    a = rng.normal(m * n).reshape(m, n) / np.sqrt(m)
    xs = np.zeros(n)
    support = rng.permutation(n)[:3]
    xs[support] = rng.normal(3)
    y = a @ xs + 0.01 * rng.normal(m)
    return LassoProblem.build(a, y, lam)


# ---------------------------------------------------------------------------
# power iteration

def test_power_iteration_matches_dense_eigensolver():
    for seed in range(5):
        rng = SeededRng(seed)
        a = rng.normal(48).reshape(6, 8)
        lam = power_iteration_sq(a, iters=2000, tol=1e-14)
        ref = float(np.linalg.eigvalsh(a.T @ a)[-1])
        assert abs(lam - ref) <= 1e-6 * ref


def test_power_iteration_zero_matrix():
    assert power_iteration_sq(np.zeros((4, 4))) == 0.0


def test_power_iteration_identity():
    lam = power_iteration_sq(np.eye(5), iters=500)
    assert abs(lam - 1.0) <= 1e-9


# ---------------------------------------------------------------------------
# closed-form checks

def test_identity_no_penalty_converges_in_one_step():
    # A = I, lam = 0, t = 1: x1 = x0 - (x0 - y) = y exactly
    y = SeededRng(1).normal(6)
    prob = LassoProblem.build(np.eye(6), y, 0.0)
    x, hist = ista_solve(prob, np.zeros(6), 1, 1.0)
    assert np.array_equal(x, y)
    assert hist[-1] == 0.0


def test_scalar_fixed_point_is_soft_threshold_of_data():
    # A = [1], y = 3, lam = 1, t = 1: x1 = soft(3, 1) = 2, then stationary
    prob = LassoProblem.build(np.array([[1.0]]), np.array([3.0]), 1.0)
    x, _ = ista_solve(prob, np.zeros(1), 1, 1.0)
    assert abs(x[0] - 2.0) <= 1e-15
    x2, _ = ista_solve(prob, x, 50, 1.0)
    assert abs(x2[0] - 2.0) <= 1e-15


def test_zero_penalty_equals_gradient_descent():
    rng = SeededRng(3)
    a = rng.normal(24).reshape(6, 4)
    y = rng.normal(6)
    prob = LassoProblem.build(a, y, 0.0)
    t = 0.9 / prob.lip
    x0 = rng.normal(4)
    xi, _ = ista_solve(prob, x0, 20, t)
    xg = x0.copy()
    for _ in range(20):
        xg = xg - t * (a.T @ (a @ xg - y))
    assert np.array_equal(xi, xg)


# ---------------------------------------------------------------------------
# behavior on random instances

def test_objective_monotone_nonincreasing():
    for seed in range(4):
        prob = _random_problem(seed)
        _, hist = ista_solve(prob, np.zeros(16), 300, 1.0 / prob.lip)
        h = np.asarray(hist)
        assert np.all(h[1:] <= h[:-1] + 1e-12)


def test_history_length_and_start_value():
    prob = _random_problem(9)
    x0 = np.zeros(16)
    _, hist = ista_solve(prob, x0, 25, 1.0 / prob.lip)
    assert len(hist) == 26
    assert hist[0] == prob.objective(x0)


def test_fixed_point_characterization():
    # at convergence x must reproduce itself under one more update
    prob = _random_problem(11)
    t = 1.0 / prob.lip
    x, _ = ista_solve(prob, np.zeros(16), 20000, t)
    step = soft_threshold(x - t * (prob.a.T @ (prob.a @ x - prob.y)),
                          prob.lam * t)
    assert np.max(np.abs(step - x)) <= 1e-10


def test_agrees_with_coordinate_descent():
    for seed in (5, 13, 77):
        prob = _random_problem(seed)
        x, _ = ista_solve(prob, np.zeros(16), 20000, 1.0 / prob.lip)
        xc = cd_lasso(prob.a, prob.y, prob.lam)
        gap = abs(prob.objective(x) - prob.objective(xc))
        assert gap <= 1e-6 * max(1.0, prob.objective(xc))
        assert np.max(np.abs(x - xc)) <= 1e-4


def test_subdifferential_optimality_of_cd_solution():
    # A^T(Ax - y) must lie in [-lam, lam], hitting the bound on the support
    prob = _random_problem(21)
    x = cd_lasso(prob.a, prob.y, prob.lam)
    g = prob.a.T @ (prob.a @ x - prob.y)
    assert np.all(np.abs(g) <= prob.lam + 1e-8)
    on = np.abs(x) > 1e-10
    assert np.allclose(g[on], -prob.lam * np.sign(x[on]), atol=1e-8)


# ---------------------------------------------------------------------------
# argument validation

def test_nonpositive_step_rejected():
    prob = _random_problem(2)
    for t in (0.0, -0.5):
        with pytest.raises(ValueError):
            ista_solve(prob, np.zeros(16), 5, t)


def test_negative_penalty_rejected():
    with pytest.raises(ValueError):
        LassoProblem.build(np.eye(3), np.ones(3), -0.1)


def test_negative_step_count_rejected():
    prob = _random_problem(2)
    with pytest.raises(ValueError):
        ista_solve(prob, np.zeros(16), -1, 0.1)
