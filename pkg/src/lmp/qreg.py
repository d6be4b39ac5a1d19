"""Convex solvers for the M-step: weighted quantile regression and logit."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.special import expit, log_expit

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Raised when a solver cannot return a valid optimum."""


def check_loss(u, tau):
    """rho_tau(u) = u * (tau - 1{u <= 0})."""
    u = np.asarray(u, dtype=float)
    return u * (tau - (u <= 0))


@dataclass
class QregProblem:
    design: np.ndarray
    response: np.ndarray
    tau: float
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.design = np.atleast_2d(np.asarray(self.design, dtype=float))
        self.response = np.asarray(self.response, dtype=float).ravel()
        n, k = self.design.shape
        if self.weights is None:
            self.weights = np.ones(n)
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if len(self.response) != n or len(self.weights) != n:
            raise ValueError("design, response and weights disagree on n")
        if n < k:
            raise ValueError(f"need n >= K, got n={n}, K={k}")
        if not (0.0 < self.tau < 1.0):
            raise ValueError("tau must lie in (0, 1)")
        if not (np.all(np.isfinite(self.design)) and np.all(np.isfinite(self.response))):
            raise ValueError("non-finite entries in quantile regression problem")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")

    def objective(self, theta) -> float:
        resid = self.response - self.design @ np.asarray(theta, dtype=float)
        return float(np.sum(self.weights * check_loss(resid, self.tau)))


def _solve_lp(problem: QregProblem, tol: float, method: str = "highs-ds") -> np.ndarray:
    # dual: max y'd  s.t.  X'd = (1 - tau) X'w,  0 <= d <= w
    x, y, w, tau = problem.design, problem.response, problem.weights, problem.tau
    res = linprog(
        -y,
        A_eq=x.T,
        b_eq=(1.0 - tau) * (x.T @ w),
        bounds=np.column_stack([np.zeros_like(w), w]),
        method=method,
        options={"primal_feasibility_tolerance": max(tol, 1e-10),
                 "dual_feasibility_tolerance": max(tol, 1e-10)},
    )
    if res.status != 0 or res.eqlin is None:
        raise SolverError(f"quantile LP failed: {res.message}")
    return -np.asarray(res.eqlin.marginals)


def _solve_lp_robust(problem: QregProblem, tol: float) -> np.ndarray:
    """Dual simplex; on a HiGHS failure retry with IPM, then IRLS."""
    try:
        return _solve_lp(problem, tol)
    except SolverError as first:
        logger.warning("%s; retrying with interior point", first)
    try:
        return _solve_lp(problem, tol, method="highs-ipm")
    except SolverError as second:
        logger.warning("%s; falling back to IRLS", second)
    return _solve_irls(problem, tol)


def _solve_irls(problem: QregProblem, tol: float, max_iter: int = 500) -> np.ndarray:
    """Huberized check loss, reweighted least squares, shrinking smoothing.

    The returned point is polished by interpolating the K observations
    with the smallest absolute residuals when that lowers the objective.
    """
    x, y, w, tau = problem.design, problem.response, problem.weights, problem.tau
    theta, *_ = np.linalg.lstsq(x * np.sqrt(w)[:, None], y * np.sqrt(w), rcond=None)
    h = max(np.std(y - x @ theta), 1e-3)
    best, best_obj = theta, problem.objective(theta)
    for _ in range(max_iter):
        r = y - x @ theta
        # weights of the quadratic majorizer of the Huberized |r|
        a = w / np.maximum(np.abs(r), h)
        rhs = x.T @ (a * r + w * (2 * tau - 1))
        step = np.linalg.solve(x.T @ (a[:, None] * x) + 1e-12 * np.eye(x.shape[1]), rhs)
        theta = theta + step
        obj = problem.objective(theta)
        if obj < best_obj:
            best, best_obj = theta, obj
        if np.max(np.abs(step)) < tol * (1 + np.max(np.abs(theta))):
            if h < tol:
                break
            h *= 0.1
    r = y - x @ best
    basis = np.argsort(np.abs(r), kind="stable")[: x.shape[1]]
    try:
        vertex = np.linalg.solve(x[basis], y[basis])
        if problem.objective(vertex) < best_obj:
            best = vertex
    except np.linalg.LinAlgError:
        pass
    return best


def solve_qreg(problem: QregProblem, tol: float = 1e-8, method: str = "lp") -> np.ndarray:
    """Minimize sum_i w_i rho_tau(y_i - x_i' theta).

    ``method="lp"`` solves the dual linear program with HiGHS dual simplex
    (falling back to interior point, then IRLS, if HiGHS reports a failure);
    ``method="irls"`` is the dependency-light smoothed alternative.
    """
    if np.linalg.matrix_rank(problem.design) < problem.design.shape[1]:
        raise SolverError("rank-deficient quantile regression design")
    if method == "lp":
        return _solve_lp_robust(problem, tol)
    if method == "irls":
        return _solve_irls(problem, tol)
    raise ValueError(f"unknown quantile regression method {method!r}")


@dataclass
class LogitProblem:
    covariate: np.ndarray
    outcome: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.covariate = np.asarray(self.covariate, dtype=float).ravel()
        self.outcome = np.asarray(self.outcome, dtype=float).ravel()
        if self.weights is None:
            self.weights = np.ones_like(self.covariate)
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if not (len(self.covariate) == len(self.outcome) == len(self.weights)):
            raise ValueError("covariate, outcome and weights disagree on n")
        if not np.all(np.isin(self.outcome, (0.0, 1.0))):
            raise ValueError("logistic outcome must be binary")

    def loglik(self, beta) -> float:
        eta = beta[0] + beta[1] * self.covariate
        return float(np.sum(self.weights * (self.outcome * log_expit(eta) + (1 - self.outcome) * log_expit(-eta))))


@dataclass
class LogitFit:
    """Unpacks as ``beta0, beta1``; the log-likelihood path is kept for checks."""

    beta0: float
    beta1: float
    loglik_trace: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.beta0, self.beta1))


def fit_logistic(problem: LogitProblem, tol: float = 1e-8, max_iter: int = 100) -> LogitFit:
    """Damped Newton with step halving for P(omega=1 | u) = expit(b0 + b1 u).

    Converged when the gradient of the mean log-likelihood is below ``tol``.
    """
    x, y, w = problem.covariate, problem.outcome, problem.weights
    pos = y[w > 0] == 1
    if pos.all() or not pos.any():
        raise SolverError("logistic fit needs both outcome classes")
    xs = x[w > 0]
    if np.ptp(xs) == 0:
        raise SolverError("logistic covariate is constant")
    if xs[pos].min() > xs[~pos].max() or xs[pos].max() < xs[~pos].min():
        raise SolverError("perfect separation: instrument is degenerate")

    design = np.column_stack([np.ones_like(x), x])
    total = np.sum(w)
    p0 = np.sum(w * y) / total
    beta = np.array([np.log(p0 / (1 - p0)), 0.0])
    ll = problem.loglik(beta)
    trace = [ll]
    for _ in range(max_iter):
        p = expit(design @ beta)
        grad = design.T @ (w * (y - p)) / total
        if np.linalg.norm(grad) < tol:
            return LogitFit(float(beta[0]), float(beta[1]), trace)
        hess = design.T @ ((w * p * (1 - p))[:, None] * design) / total
        step = np.linalg.solve(hess, grad)
        scale = 1.0
        while scale > 1e-10:
            cand = beta + scale * step
            cand_ll = problem.loglik(cand)
            if cand_ll >= ll:
                break
            scale *= 0.5
        else:
            # no ascent left at machine precision
            break
        beta, ll = cand, cand_ll
        trace.append(ll)
    p = expit(design @ beta)
    grad = np.linalg.norm(design.T @ (w * (y - p)) / total)
    if grad >= max(tol, 1e-10) * 1e3:
        raise SolverError(f"logistic fit did not converge (gradient {grad:.3g})")
    return LogitFit(float(beta[0]), float(beta[1]), trace)
