"""Modified stochastic EM for the two-component hidden Markov earnings model.

Model: y_t = U_t + V_t, with U and V first-order Markov processes whose
conditional quantile functions are Hermite sieves, and a binary
instrument omega_t with P(omega_t = 1 | U_t) = expit(beta0 + beta1 U_t).

The E-step draws U paths by single-site random-walk Metropolis-Hastings
(V = y - U is implied); the M-step runs one weighted quantile regression
per tau knot and equation, refits tail rates and the logit, then
recenters the V kernels.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import qr
from scipy.special import log_expit
from scipy.stats import norm

from . import rng
from .panel_io import PanelDataset
from .qreg import LogitProblem, QregProblem, fit_logistic, solve_qreg
from .sieve import HermiteBasis, QuantileSieve, TauGrid

logger = logging.getLogger(__name__)

# households per E-step block; fixed so results do not depend on thread count
BLOCK_SIZE = 256
# quantiles of the conditioning draws beyond which transition kernels extrapolate
# flat; empirical-CDF quantiles so that duplicating every draw changes nothing
LAG_SUPPORT = (0.005, 0.995)

SIEVE_NAMES = ("sieve_U", "sieve_V", "sieve_U1", "sieve_V1")


class MsemDivergence(RuntimeError):
    """Raised when a trace becomes non-finite; carries a diagnostic dump."""

    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class ModelParams:
    sieve_U: QuantileSieve
    sieve_V: QuantileSieve
    sieve_U1: QuantileSieve
    sieve_V1: QuantileSieve
    beta0: float = 0.0
    beta1: float = 1.0

    def __post_init__(self):
        grids = {s.grid for s in self.sieves()}
        if len(grids) != 1:
            raise ValueError("all four sieves must share one tau grid")

    def sieves(self):
        return tuple(getattr(self, name) for name in SIEVE_NAMES)

    def to_dict(self) -> dict:
        out = {name: getattr(self, name).to_dict() for name in SIEVE_NAMES}
        out["beta0"] = self.beta0
        out["beta1"] = self.beta1
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        sieves = {name: QuantileSieve.from_dict(data[name]) for name in SIEVE_NAMES}
        return cls(**sieves, beta0=float(data["beta0"]), beta1=float(data["beta1"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def average(cls, iterates) -> "ModelParams":
        """Coefficient-wise mean of several iterates sharing bases."""
        iterates = list(iterates)
        first = iterates[0]
        sieves = {}
        for name in SIEVE_NAMES:
            members = [getattr(p, name) for p in iterates]
            sieve = getattr(first, name).with_coeffs(
                np.mean([s.coeffs for s in members], axis=0),
                float(np.mean([s.tail_lambda_low for s in members])),
                float(np.mean([s.tail_lambda_high for s in members])),
            )
            bounds = [s.basis.lag_bounds for s in members if s.basis.lag_bounds is not None]
            if bounds:
                # the support every averaged iterate was fitted on
                lo, hi = max(b[0] for b in bounds), min(b[1] for b in bounds)
                if lo <= hi:
                    sieve = _bounded(sieve, None, (lo, hi))
            sieves[name] = sieve
        return cls(
            **sieves,
            beta0=float(np.mean([p.beta0 for p in iterates])),
            beta1=float(np.mean([p.beta1 for p in iterates])),
        )


@dataclass
class MsemConfig:
    """Estimator settings.

    ``mh_proposal_sd=None`` means 0.25 * sd(y); ``averaging_window=None``
    means the last ceil(S/2) iterates.
    """

    n_outer: int = 50
    n_draws: int = 1
    mh_steps_per_estep: int = 20
    mh_proposal_sd: float | None = None
    burn_in_fraction: float = 0.5
    averaging_window: int | None = None
    seed: int = 0
    tol_qreg: float = 1e-8
    n_knots: int = 11
    degree_lag: int = 3
    degree_age: int = 2
    degree_age_initial: int = 2
    qreg_method: str = "lp"
    threads: int = 1

    def __post_init__(self):
        if self.n_outer < 1 or self.n_draws < 1 or self.mh_steps_per_estep < 0:
            raise ValueError("n_outer and n_draws must be >= 1, mh_steps_per_estep >= 0")
        if self.mh_proposal_sd is not None and not self.mh_proposal_sd > 0:
            raise ValueError("mh_proposal_sd must be positive")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ValueError("burn_in_fraction must lie in [0, 1)")
        if self.averaging_window is not None and self.averaging_window < 1:
            raise ValueError("averaging_window must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def proposal_sd(self, data: PanelDataset) -> float:
        if self.mh_proposal_sd is not None:
            return self.mh_proposal_sd
        return 0.25 * float(np.std(data.y))

    def window(self) -> int:
        if self.averaging_window is not None:
            return min(self.averaging_window, self.n_outer)
        return math.ceil(self.n_outer / 2)


@dataclass
class MsemState:
    params: ModelParams
    latent_draws: np.ndarray
    loglik_trace: list = field(default_factory=list)
    surrogate_loss_trace: list = field(default_factory=list)
    acceptance_trace: list = field(default_factory=list)
    param_history: list = field(default_factory=list)
    iteration: int = 0


# ---------------------------------------------------------------------------
# bases and initial values


def model_bases(data: PanelDataset, config: MsemConfig):
    """Bases for (U, V, U1, V1), standardized on the estimation sample."""
    scale = float(np.std(data.y)) or 1.0
    age = dict(age_center=data.age_mean, age_scale=data.age_sd)
    return (
        HermiteBasis(config.degree_lag, config.degree_age, float(np.mean(data.y)), scale, **age),
        HermiteBasis(config.degree_lag, config.degree_age, 0.0, scale, **age),
        HermiteBasis(0, config.degree_age_initial, 0.0, 1.0, **age),
        HermiteBasis(0, config.degree_age_initial, 0.0, 1.0, **age),
    )


def _exceedance_rates(values, low, high, weights=None, fallback=1.0):
    """Exponential tail rates: 1 / mean exceedance beyond each extreme knot."""
    values = np.asarray(values, dtype=float)
    weights = np.ones_like(values) if weights is None else weights
    rates = []
    for gap in (low - values, values - high):
        hit = gap > 0
        if hit.any():
            mean_gap = np.sum(weights[hit] * gap[hit]) / np.sum(weights[hit])
            rates.append(1.0 / mean_gap if mean_gap > 0 else fallback)
        else:
            rates.append(fallback)
    return rates


def _unconditional_sieve(basis, grid, sample):
    knots = np.quantile(sample, grid.knots)
    fallback = 1.0 / (float(np.std(sample)) or 1.0)
    lam_lo, lam_hi = _exceedance_rates(sample, knots[0], knots[-1], fallback=fallback)
    return QuantileSieve.from_knot_values(basis, grid, knots, lam_lo, lam_hi)


def unconditional_init(data: PanelDataset, config: MsemConfig) -> ModelParams:
    """Unconditional quantiles of y/2 for U and of y - median(y) for V."""
    grid = TauGrid.uniform(config.n_knots)
    b_u, b_v, b_u1, b_v1 = model_bases(data, config)
    half = data.y / 2
    centered = data.y - np.median(data.y)
    return ModelParams(
        sieve_U=_unconditional_sieve(b_u, grid, half),
        sieve_V=_unconditional_sieve(b_v, grid, centered),
        sieve_U1=_unconditional_sieve(b_u1, grid, half[:, 0]),
        sieve_V1=_unconditional_sieve(b_v1, grid, centered[:, 0]),
        beta0=0.0,
        beta1=1.0,
    )


def warm_init(data: PanelDataset, config: MsemConfig) -> ModelParams:
    """One M-step on the starting chains U = y/2.

    Unlike the unconditional start, the U kernel begins with the lag
    dependence of y/2, which keeps short runs out of a low-persistence
    basin.
    """
    return mstep_update(initial_draws(data, 1), data, config)


def difference_moments(data: PanelDataset, floor: float = 1e-3) -> dict:
    """Variances of a random walk plus i.i.d. noise matched to first differences.

    With dy_t = eta_t + v_t - v_{t-1}: cov(dy_t, dy_{t-1}) = -var(v) and
    var(dy) = var(eta) + 2 var(v). Each variance is floored at
    ``floor * var(y)`` so a panel that does not fit the model still yields
    proper kernels.
    """
    dy = np.diff(data.y, axis=1)
    dy = dy - dy.mean(axis=0)
    lag1 = float(np.mean(dy[:, 1:] * dy[:, :-1]))
    low = floor * float(np.var(data.y))
    var_v = max(-lag1, low)
    return {
        "var_v": var_v,
        "var_eta": max(float(np.mean(dy**2)) - 2 * var_v, low),
        "var_u1": max(float(np.var(data.y[:, 0])) - var_v, low),
        "mean_u1": float(np.mean(data.y[:, 0])),
    }


def _gaussian_sieve(basis, grid, sd, mean=0.0, slope=0.0):
    """Q(tau | x) = mean + slope * x + sd z_tau on the basis' standardization."""
    z = norm.ppf(grid.knots)
    coeffs = np.zeros((len(grid), basis.n_terms))
    coeffs[:, 0] = mean + sd * z + slope * basis.lag_center
    if slope:
        coeffs[:, 1] = slope * basis.lag_scale
    # exponential rate with the normal's mean exceedance beyond the extreme knot
    lam = 1.0 / (sd * (norm.pdf(z[-1]) / norm.sf(z[-1]) - z[-1]))
    return QuantileSieve(basis, grid, coeffs, lam, lam)


def moment_init(data: PanelDataset, config: MsemConfig) -> ModelParams:
    """Linear Gaussian kernels of a random walk plus i.i.d. noise.

    Variances come from ``difference_moments``; the instrument slope from a
    logistic fit on y. Starting the stochastic EM here avoids the long
    transient of the y/2 split, which begins with V as persistent as U.
    """
    grid = TauGrid.uniform(config.n_knots)
    b_u, b_v, b_u1, b_v1 = model_bases(data, config)
    m = difference_moments(data)
    sd_v = math.sqrt(m["var_v"])
    logit = fit_logistic(LogitProblem(data.y.ravel(), np.asarray(data.instrument, dtype=float).ravel()))
    return ModelParams(
        sieve_U=_gaussian_sieve(b_u, grid, math.sqrt(m["var_eta"]), slope=1.0),
        sieve_V=_gaussian_sieve(b_v, grid, sd_v),
        sieve_U1=_gaussian_sieve(b_u1, grid, math.sqrt(m["var_u1"]), mean=m["mean_u1"]),
        sieve_V1=_gaussian_sieve(b_v1, grid, sd_v),
        beta0=logit.beta0,
        beta1=logit.beta1,
    )


INITS = {"default": moment_init, "moments": moment_init, "warm": warm_init, "unconditional": unconditional_init}


def initial_params(data: PanelDataset, config: MsemConfig, init="default") -> ModelParams:
    if isinstance(init, ModelParams):
        return init
    try:
        return INITS[init](data, config)
    except KeyError:
        raise ValueError(f"unknown init {init!r}; expected ModelParams or one of {sorted(INITS)}") from None


# ---------------------------------------------------------------------------
# likelihood


def _instrument_loglik(params, u, omega):
    eta = params.beta0 + params.beta1 * u
    return omega * log_expit(eta) + (1 - omega) * log_expit(-eta)


def path_loglik(params: ModelParams, u, y, age, omega) -> np.ndarray:
    """Complete-data log-likelihood of each row of (R, T) path arrays."""
    u, y, age, omega = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (u, y, age, omega))
    v = y - u
    zeros = np.zeros(len(u))
    total = params.sieve_U1.log_density(u[:, 0], zeros, age[:, 0])
    total = total + params.sieve_V1.log_density(v[:, 0], zeros, age[:, 0])
    for t in range(1, u.shape[1]):
        total = total + params.sieve_U.log_density(u[:, t], u[:, t - 1], age[:, t])
        total = total + params.sieve_V.log_density(v[:, t], v[:, t - 1], age[:, t])
    return total + _instrument_loglik(params, u, omega).sum(axis=1)


def complete_data_loglik(params: ModelParams, u_path, y_path, age_path, omega_path) -> float:
    return float(path_loglik(params, u_path, y_path, age_path, omega_path)[0])


def _site_loglik(params, u, y, age, omega, t):
    """Terms of the complete-data log-likelihood that involve u[:, t]."""
    n_periods = u.shape[1]
    v = y - u
    if t == 0:
        zeros = np.zeros(len(u))
        out = params.sieve_U1.log_density(u[:, 0], zeros, age[:, 0])
        out = out + params.sieve_V1.log_density(v[:, 0], zeros, age[:, 0])
    else:
        out = params.sieve_U.log_density(u[:, t], u[:, t - 1], age[:, t])
        out = out + params.sieve_V.log_density(v[:, t], v[:, t - 1], age[:, t])
    if t < n_periods - 1:
        out = out + params.sieve_U.log_density(u[:, t + 1], u[:, t], age[:, t + 1])
        out = out + params.sieve_V.log_density(v[:, t + 1], v[:, t], age[:, t + 1])
    return out + _instrument_loglik(params, u[:, t], omega[:, t])


# ---------------------------------------------------------------------------
# E-step


def mh_sweeps(params, u, y, age, omega, steps, normals, uniforms, record=False):
    """Single-site random-walk MH over t = 1..T, ``steps`` times.

    ``normals`` are pre-scaled proposal increments and ``uniforms`` the
    acceptance variates, both shaped (R, steps, T). Returns the final
    paths, the number of accepted moves and, if ``record``, the path after
    every sweep (R, steps, T).
    """
    u = np.array(u, dtype=float)
    accepted = 0
    history = np.empty((len(u), steps, u.shape[1])) if record else None
    for s in range(steps):
        for t in range(u.shape[1]):
            current = _site_loglik(params, u, y, age, omega, t)
            proposal = u.copy()
            proposal[:, t] += normals[:, s, t]
            delta = _site_loglik(params, proposal, y, age, omega, t) - current
            # accept with probability min(1, exp(delta))
            accept = np.log(uniforms[:, s, t]) < delta
            u[accept, t] = proposal[accept, t]
            accepted += int(accept.sum())
        if record:
            history[:, s] = u
    return u, accepted, history


def _chain_noise(seed, iteration, households, n_draws, steps, n_periods, sd):
    normals = np.empty((len(households), n_draws, steps, n_periods))
    uniforms = np.empty_like(normals)
    for a, i in enumerate(households):
        for m in range(n_draws):
            gen = rng.stream(seed, rng.ESTEP, iteration, i, m)
            normals[a, m] = gen.standard_normal((steps, n_periods)) * sd
            uniforms[a, m] = gen.random((steps, n_periods))
    shape = (len(households) * n_draws, steps, n_periods)
    return normals.reshape(shape), uniforms.reshape(shape)


def _estep_block(params, data, config, draws, rows, iteration, steps, sd):
    n_draws = config.n_draws
    t = data.n_periods

    def expand(a):
        return np.repeat(np.asarray(a, dtype=float)[rows], n_draws, axis=0)

    u0 = draws[rows].transpose(0, 2, 1).reshape(len(rows) * n_draws, t)
    normals, uniforms = _chain_noise(config.seed, iteration, rows, n_draws, steps, t, sd)
    u, accepted, _ = mh_sweeps(
        params, u0, expand(data.y), expand(data.age), expand(data.instrument), steps, normals, uniforms
    )
    return u.reshape(len(rows), n_draws, t).transpose(0, 2, 1), accepted


def initial_draws(data: PanelDataset, n_draws: int) -> np.ndarray:
    """First-iteration chains: U = y / 2 for every chain."""
    return np.repeat((data.y / 2)[:, :, None], n_draws, axis=2)


def estep_sample(state: MsemState, data: PanelDataset, config: MsemConfig, steps=None):
    """Advance every (household, chain) MH chain; returns (draws, acceptance rate).

    Streams are keyed by (seed, state.iteration, household, chain).
    """
    steps = config.mh_steps_per_estep if steps is None else steps
    sd = config.proposal_sd(data)
    draws = state.latent_draws
    blocks = [np.arange(s, min(s + BLOCK_SIZE, data.n_households)) for s in range(0, data.n_households, BLOCK_SIZE)]

    def run(rows):
        return _estep_block(state.params, data, config, draws, rows, state.iteration, steps, sd)

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(rows) for rows in blocks]
    new = np.concatenate([r[0] for r in results], axis=0)
    moves = steps * data.n_periods * data.n_households * config.n_draws
    rate = sum(r[1] for r in results) / moves if moves else 0.0
    return new, rate


# ---------------------------------------------------------------------------
# M-step


def _pooled(columns, n_draws):
    """Collapse identical observations into weights (count / n_draws)."""
    stacked = np.column_stack(columns)
    unique, counts = np.unique(stacked, axis=0, return_counts=True)
    return unique, counts / n_draws


def _independent_columns(design, rtol=1e-9):
    """Indices of a maximal set of linearly independent columns, in order."""
    _, r, piv = qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > rtol * diag[0])) if diag.size and diag[0] > 0 else 0
    return np.sort(piv[:rank])


def _fit_equation(sieve, response, lag, age, weights, config, pool):
    """Knot-wise quantile regressions for one equation; returns (sieve, loss)."""
    design = sieve.basis.design(lag, age)
    keep = _independent_columns(design * np.sqrt(weights)[:, None])
    reduced = design[:, keep]
    knots = sieve.grid.knots

    def solve(tau):
        problem = QregProblem(reduced, response, float(tau), weights)
        theta = solve_qreg(problem, config.tol_qreg, config.qreg_method)
        return theta, problem.objective(theta)

    results = list(pool.map(solve, knots)) if pool is not None else [solve(t) for t in knots]
    coeffs = np.zeros((len(knots), sieve.basis.n_terms))
    coeffs[:, keep] = np.array([r[0] for r in results])
    loss = sum(r[1] for r in results) / np.sum(weights)
    fitted = np.sort(reduced @ coeffs[:, keep].T, axis=1)
    fallback = 1.0 / (float(np.std(response)) or 1.0)
    lam_lo, lam_hi = _exceedance_rates(response, fitted[:, 0], fitted[:, -1], weights, fallback)
    return sieve.with_coeffs(coeffs, lam_lo, lam_hi), loss


def fit_sieve(basis: HermiteBasis, grid: TauGrid, response, lag, age, weights=None,
              tol: float = 1e-8, method: str = "lp") -> QuantileSieve:
    """Knot-wise quantile regression of ``response`` on basis(lag, age)."""
    response = np.asarray(response, dtype=float).ravel()
    weights = np.ones_like(response) if weights is None else np.asarray(weights, dtype=float).ravel()
    template = QuantileSieve.from_knot_values(basis, grid, np.zeros(len(grid)))
    config = MsemConfig(tol_qreg=tol, qreg_method=method)
    sieve, _ = _fit_equation(template, response, np.ravel(lag), np.ravel(age), weights, config, None)
    return sieve


def _bounded(sieve: QuantileSieve, lag, bounds=None) -> QuantileSieve:
    if bounds is None:
        bounds = tuple(float(b) for b in np.quantile(lag, LAG_SUPPORT, method="inverted_cdf"))
    return replace(sieve, basis=replace(sieve.basis, lag_bounds=bounds))


def recenter(sieve: QuantileSieve) -> QuantileSieve:
    """Shift the intercept so the knot average at the basis center is zero."""
    center = sieve.basis.design(sieve.basis.lag_center, sieve.basis.age_center)[0]
    shift = float(np.mean(sieve.coeffs @ center))
    coeffs = np.array(sieve.coeffs)
    coeffs[:, 0] -= shift
    return sieve.with_coeffs(coeffs)


def mstep_update(latent_draws, data: PanelDataset, config: MsemConfig, return_loss=False):
    """Quantile-regression M-step on pooled (household, period, chain) draws.

    ``latent_draws`` has shape (N, T, M). Returns ModelParams, or
    (ModelParams, surrogate loss) when ``return_loss`` is set.
    """
    u = np.asarray(latent_draws, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("latent draws must be finite")
    n_draws = u.shape[2]
    y = np.repeat(data.y[:, :, None], n_draws, axis=2)
    v = y - u
    age = np.repeat(np.asarray(data.age, dtype=float)[:, :, None], n_draws, axis=2)
    omega = np.repeat(np.asarray(data.instrument, dtype=float)[:, :, None], n_draws, axis=2)

    grid = TauGrid.uniform(config.n_knots)
    b_u, b_v, b_u1, b_v1 = model_bases(data, config)
    templates = [QuantileSieve.from_knot_values(b, grid, np.zeros(len(grid))) for b in (b_u, b_v, b_u1, b_v1)]

    transition = [
        (u[:, 1:].ravel(), u[:, :-1].ravel(), age[:, 1:].ravel()),
        (v[:, 1:].ravel(), v[:, :-1].ravel(), age[:, 1:].ravel()),
    ]
    initial = [
        (u[:, 0].ravel(), np.zeros(u[:, 0].size), age[:, 0].ravel()),
        (v[:, 0].ravel(), np.zeros(v[:, 0].size), age[:, 0].ravel()),
    ]
    pool = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    try:
        fitted, loss = [], 0.0
        for template, columns in zip(templates, transition + initial):
            pooled, weights = _pooled(columns, n_draws)
            sieve, eq_loss = _fit_equation(template, pooled[:, 0], pooled[:, 1], pooled[:, 2], weights, config, pool)
            fitted.append(sieve)
            loss += eq_loss
    finally:
        if pool is not None:
            pool.shutdown()

    pooled, weights = _pooled((u.ravel(), omega.ravel()), n_draws)
    logit = fit_logistic(LogitProblem(pooled[:, 0], pooled[:, 1], weights))
    # the cubic terms are poorly pinned by the sparse extreme draws
    fitted[:2] = [_bounded(sieve, columns[1]) for sieve, columns in zip(fitted[:2], transition)]
    params = ModelParams(
        sieve_U=fitted[0],
        sieve_V=recenter(fitted[1]),
        sieve_U1=fitted[2],
        sieve_V1=recenter(fitted[3]),
        beta0=logit.beta0,
        beta1=logit.beta1,
    )
    return (params, loss) if return_loss else params


# ---------------------------------------------------------------------------
# outer loop


def mean_loglik(params, data, draws) -> float:
    n, t, m = draws.shape
    u = draws.transpose(0, 2, 1).reshape(n * m, t)

    def expand(a):
        return np.repeat(np.asarray(a, dtype=float), m, axis=0)

    return float(np.mean(path_loglik(params, u, expand(data.y), expand(data.age), expand(data.instrument))))


def _checkpoint(state: MsemState, path: Path) -> None:
    payload = {
        "iteration": state.iteration,
        "params": state.params.to_dict(),
        "loglik_trace": state.loglik_trace,
        "surrogate_loss_trace": state.surrogate_loss_trace,
        "acceptance_trace": state.acceptance_trace,
        "param_history": [p.to_dict() for p in state.param_history],
    }
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(json.dumps(payload) + "\n")
    tmp.replace(path)


def load_checkpoint(path, data: PanelDataset, config: MsemConfig) -> MsemState:
    """Rebuild an MsemState from a checkpoint; latent draws restart at y/2."""
    payload = json.loads(Path(path).read_text())
    return MsemState(
        params=ModelParams.from_dict(payload["params"]),
        latent_draws=initial_draws(data, config.n_draws),
        loglik_trace=list(payload["loglik_trace"]),
        surrogate_loss_trace=list(payload["surrogate_loss_trace"]),
        acceptance_trace=list(payload.get("acceptance_trace", [])),
        param_history=[ModelParams.from_dict(p) for p in payload["param_history"]],
        iteration=int(payload["iteration"]),
    )


def run_msem(data: PanelDataset, config: MsemConfig, init="default", checkpoint=None, resume=None,
             reburn_factor: int = 5, progress=None):
    """Alternate E- and M-steps for ``config.n_outer`` iterations.

    Returns (averaged ModelParams, final MsemState). ``checkpoint`` names
    a JSON file rewritten after every iteration; ``resume`` restarts from
    one, re-burning the latent chains with ``reburn_factor`` times the
    usual number of MH sweeps.
    """
    if resume is not None:
        state = load_checkpoint(resume, data, config)
        reburn = True
    else:
        params = initial_params(data, config, init)
        state = MsemState(params=params, latent_draws=initial_draws(data, config.n_draws))
        reburn = False

    while state.iteration < config.n_outer:
        steps = config.mh_steps_per_estep * (reburn_factor if reburn else 1)
        reburn = False
        draws, rate = estep_sample(state, data, config, steps=steps)
        params, loss = mstep_update(draws, data, config, return_loss=True)
        ll = mean_loglik(params, data, draws)
        if not (np.isfinite(ll) and np.isfinite(loss)):
            dump = {"iteration": state.iteration, "loglik": ll, "surrogate_loss": loss,
                    "params": params.to_dict(), "draws_finite": bool(np.all(np.isfinite(draws)))}
            raise MsemDivergence(f"non-finite trace at iteration {state.iteration}", dump)
        state.params = params
        state.latent_draws = draws
        state.loglik_trace.append(ll)
        state.surrogate_loss_trace.append(loss)
        state.acceptance_trace.append(rate)
        state.param_history.append(params)
        state.iteration += 1
        logger.info("iteration %d: loglik %.4f surrogate %.5f acceptance %.3f", state.iteration, ll, loss, rate)
        if progress is not None:
            progress(state)
        if checkpoint is not None:
            _checkpoint(state, Path(checkpoint))

    averaged = ModelParams.average(state.param_history[-config.window():])
    return averaged, state


def config_dict(config: MsemConfig) -> dict:
    return asdict(config)
