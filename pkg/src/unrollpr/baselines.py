"""Classical sparse-recovery solvers used as independent numerical anchors.

Real-valued, dense, deliberately simple: the iterative shrinkage solver
exercises the same gradient-step + soft-threshold structure the unrolled
network learns, and the coordinate-descent solver is a second, unrelated
route to the same optimum for cross-checking.
"""

from dataclasses import dataclass

import numpy as np

from .network import soft_threshold


def power_iteration_sq(a, iters=100, tol=1e-10, seed=0):
    """Largest eigenvalue of A^T A by power iteration on v -> A^T(Av)."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        u = a.T @ (a @ v)
        nrm = np.linalg.norm(u)
        if nrm == 0.0:
            return 0.0
        v = u / nrm
        prev, lam = lam, float(v @ (a.T @ (a @ v)))
        if lam > 0 and abs(lam - prev) <= tol * lam:
            break
    return lam


@dataclass
class LassoProblem:
    """min_x 0.5 ||Ax - y||^2 + lam ||x||_1 with the Lipschitz bound L."""

    a: np.ndarray
    y: np.ndarray
    lam: float
    lip: float

    @staticmethod
    def build(a, y, lam):
        if lam < 0:
            raise ValueError("regularization weight must be nonnegative")
        a = np.asarray(a, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return LassoProblem(a=a, y=y, lam=float(lam), lip=power_iteration_sq(a))

    def objective(self, x):
        r = self.a @ x - self.y
        return 0.5 * float(r @ r) + self.lam * float(np.abs(x).sum())


def ista_solve(problem, x0, steps, t):
    """Iterative shrinkage: x <- soft(x - t A^T(Ax - y), lam*t).

    Returns (solution, objective history); history[0] is the start point,
    one entry per step after, monotone nonincreasing for t <= 1/L.
    """
    if t <= 0:
        raise ValueError("step size must be positive, got %r" % (t,))
    if steps < 0:
        raise ValueError("step count must be nonnegative")
    a, y, lam = problem.a, problem.y, problem.lam
    x = np.asarray(x0, dtype=np.float64).copy()
    history = [problem.objective(x)]
    for _ in range(steps):
        x = soft_threshold(x - t * (a.T @ (a @ x - y)), lam * t)
        history.append(problem.objective(x))
    return x, history


def cd_lasso(a, y, lam, x0=None, max_sweeps=10000, tol=1e-12):
    """Coordinate-descent solver for the same objective, run to convergence.

    Each sweep minimizes the objective exactly in one coordinate at a time:
    x_i <- soft(rho_i, lam) / ||a_i||^2 with rho_i the partial residual
    correlation.  Serves as the brute-force oracle for ista_solve.
    """
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = a.shape[1]
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    col_sq = np.einsum("ij,ij->j", a, a)
    r = y - a @ x
    for _ in range(max_sweeps):
        delta = 0.0
        for i in range(n):
            if col_sq[i] == 0.0:
                continue
            xi = x[i]
            rho = a[:, i] @ r + col_sq[i] * xi
            xnew = float(soft_threshold(rho, lam)) / col_sq[i]
            if xnew != xi:
                r += a[:, i] * (xi - xnew)
                x[i] = xnew
                delta = max(delta, abs(xnew - xi))
        if delta <= tol:
            break
    return x
