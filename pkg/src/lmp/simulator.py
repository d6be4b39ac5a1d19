"""Synthetic panels from known data-generating processes.

Three DGP kinds share one output format:

* ``canonical`` - random-walk U plus i.i.d. Gaussian or Laplace V;
* ``nonlinear_sieve`` - built-in sieve kernels whose conditional skewness
  flips sign across the lagged state (``skew_reversal_params``);
* ``fitted`` - any ModelParams, e.g. an estimate loaded from JSON.

Each household draws from its own keyed streams, one per latent
component and one for the instrument, so U, V and omega are
independent and the panel does not depend on household order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import norm

from . import rng
from .msem import ModelParams
from .panel_io import MIN_PERIODS, PanelDataset, RawPanel, write_panel
from .sieve import HermiteBasis, QuantileSieve, TauGrid

KINDS = ("canonical", "nonlinear_sieve", "fitted")
TRANSITORY = ("gaussian", "laplace")
BASE_YEAR = 2000


@dataclass
class DgpSpec:
    """Data-generating process settings.

    ``transitory_scale`` is the standard deviation of V for both
    distributions (the Laplace scale parameter is scale / sqrt(2)).
    Ages are deterministic: start_age + t * age_increment.
    """

    kind: str = "canonical"
    sigma_eta: float = 0.15
    transitory_dist: str = "gaussian"
    transitory_scale: float = 0.10
    instrument_beta: tuple[float, float] = (0.0, 1.0)
    n_households: int = 1000
    n_periods: int = 6
    start_age: float = 30.0
    age_increment: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.instrument_beta = tuple(float(b) for b in self.instrument_beta)
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.transitory_dist not in TRANSITORY:
            raise ValueError(f"transitory_dist must be one of {TRANSITORY}")
        if self.n_periods < MIN_PERIODS:
            raise ValueError(f"n_periods must be >= {MIN_PERIODS}")
        if self.n_households < 1:
            raise ValueError("n_households must be >= 1")
        if self.sigma_eta < 0 or self.transitory_scale <= 0:
            raise ValueError("scales must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["instrument_beta"] = list(self.instrument_beta)
        return out


def _ages(n, t, start_age, increment):
    return np.broadcast_to(start_age + increment * np.arange(t), (n, t)).astype(float)


def _household_draws(seed, purpose, n, t, draw):
    return np.stack([draw(rng.stream(seed, purpose, i), t) for i in range(n)])


def _instrument(seed, u, beta0, beta1):
    n, t = u.shape
    uniforms = _household_draws(seed, rng.SIM_OMEGA, n, t, lambda g, k: g.random(k))
    return (uniforms < expit(beta0 + beta1 * u)).astype(np.int64)


def _dataset(y, age, omega):
    age_sd = float(age.std()) or 1.0
    return PanelDataset(
        y=y, age=age, instrument=omega, beta_hat=np.zeros(1),
        age_mean=float(age.mean()), age_sd=age_sd, household_id=np.arange(len(y)),
    )


def simulate_canonical(spec: DgpSpec):
    """Random-walk persistent component plus i.i.d. transitory noise.

    Returns (PanelDataset, truth) with truth[..., 0] = U and truth[..., 1] = V.
    """
    n, t = spec.n_households, spec.n_periods
    shocks = _household_draws(spec.seed, rng.SIM_U, n, t, lambda g, k: g.standard_normal(k))
    u = np.cumsum(spec.sigma_eta * shocks, axis=1)
    if spec.transitory_dist == "gaussian":
        v = spec.transitory_scale * _household_draws(spec.seed, rng.SIM_V, n, t, lambda g, k: g.standard_normal(k))
    else:
        b = spec.transitory_scale / np.sqrt(2.0)
        v = _household_draws(spec.seed, rng.SIM_V, n, t, lambda g, k: g.laplace(0.0, b, k))
    omega = _instrument(spec.seed, u, *spec.instrument_beta)
    age = _ages(n, t, spec.start_age, spec.age_increment)
    return _dataset(u + v, age, omega), np.stack([u, v], axis=2)


def simulate_paths(params: ModelParams, n, t, age_profile=(30.0, 1.0), seed=0):
    """Latent (U, V) paths and ages drawn by inverse-CDF sampling."""
    age = _ages(n, t, *age_profile)
    eta = _household_draws(seed, rng.SIM_U, n, t, lambda g, k: g.random(k))
    eps = _household_draws(seed, rng.SIM_V, n, t, lambda g, k: g.random(k))
    u = np.empty((n, t))
    v = np.empty((n, t))
    zeros = np.zeros(n)
    u[:, 0] = params.sieve_U1.sample(zeros, age[:, 0], eta[:, 0])
    v[:, 0] = params.sieve_V1.sample(zeros, age[:, 0], eps[:, 0])
    for s in range(1, t):
        u[:, s] = params.sieve_U.sample(u[:, s - 1], age[:, s], eta[:, s])
        v[:, s] = params.sieve_V.sample(v[:, s - 1], age[:, s], eps[:, s])
    return u, v, age


def simulate_from_model(params: ModelParams, n: int, t: int, age_profile=(30.0, 1.0), seed: int = 0,
                        return_truth: bool = False):
    """Panel generated by a (fitted or built-in) ModelParams."""
    if t < MIN_PERIODS:
        raise ValueError(f"t must be >= {MIN_PERIODS}")
    u, v, age = simulate_paths(params, n, t, age_profile, seed)
    omega = _instrument(seed, u, params.beta0, params.beta1)
    data = _dataset(u + v, age, omega)
    return (data, np.stack([u, v], axis=2)) if return_truth else data


def _normal_tail_rate(sd, tau):
    z = norm.ppf(tau)
    return 1.0 / (sd * (norm.pdf(z) / norm.sf(z) - z))


def _skewed_kernel(grid, rho, sigma, kappa, state_sd):
    """Q(tau | x) = rho x + sigma z_tau (1 - kappa sign(z_tau) x / state_sd).

    Bowley skewness at tau is -kappa x / state_sd: right-skewed below the
    centre of the state distribution, left-skewed above it.
    """
    z = norm.ppf(grid.knots)
    basis = HermiteBasis(degree_lag=1, degree_age=0, lag_center=0.0, lag_scale=state_sd)
    coeffs = np.column_stack([sigma * z, rho * state_sd - sigma * kappa * np.abs(z)])
    lam = _normal_tail_rate(sigma, grid.knots[-1])
    return QuantileSieve(basis, grid, coeffs, lam, lam)


def _gaussian_initial(grid, sd):
    basis = HermiteBasis(degree_lag=0, degree_age=0)
    lam = _normal_tail_rate(sd, grid.knots[-1])
    return QuantileSieve.from_knot_values(basis, grid, sd * norm.ppf(grid.knots), lam, lam)


def skew_reversal_params(n_knots=11, rho_u=0.8, sigma_u=0.25, kappa_u=0.35,
                         rho_v=0.2, sigma_v=0.15, kappa_v=0.35, beta=(0.0, 1.0)) -> ModelParams:
    """Built-in nonlinear DGP with conditional skewness reversing sign in the lag."""
    grid = TauGrid.uniform(n_knots)
    sd_u = sigma_u / np.sqrt(1 - rho_u**2)
    sd_v = sigma_v / np.sqrt(1 - rho_v**2)
    return ModelParams(
        sieve_U=_skewed_kernel(grid, rho_u, sigma_u, kappa_u, sd_u),
        sieve_V=_skewed_kernel(grid, rho_v, sigma_v, kappa_v, sd_v),
        sieve_U1=_gaussian_initial(grid, sd_u),
        sieve_V1=_gaussian_initial(grid, sd_v),
        beta0=float(beta[0]),
        beta1=float(beta[1]),
    )


def simulate(spec: DgpSpec, params: ModelParams | None = None):
    """Dispatch on ``spec.kind``; returns (PanelDataset, truth)."""
    if spec.kind == "canonical":
        return simulate_canonical(spec)
    if spec.kind == "nonlinear_sieve":
        params = skew_reversal_params(beta=spec.instrument_beta)
    elif params is None:
        raise ValueError("kind 'fitted' needs ModelParams")
    return simulate_from_model(
        params, spec.n_households, spec.n_periods, (spec.start_age, spec.age_increment),
        spec.seed, return_truth=True,
    )


def to_raw_panel(data: PanelDataset) -> RawPanel:
    n, t = data.y.shape
    hid = data.household_id if data.household_id is not None else np.arange(n)
    return RawPanel(
        household_id=np.asarray(hid, dtype=np.int64),
        year=np.broadcast_to(BASE_YEAR + np.arange(t), (n, t)).astype(np.int64),
        log_earnings=np.array(data.y),
        age=np.array(data.age),
        demographics=np.empty((n, t, 0)),
        instrument=np.array(data.instrument, dtype=np.int64),
    )


def write_simulation(data: PanelDataset, truth, out_dir, suffix: str = "") -> list:
    """panel.csv in the ingest schema plus truth.csv (household, year, U, V)."""
    out = Path(out_dir)
    raw = to_raw_panel(data)
    paths = [out / ("panel.csv" + suffix), out / ("truth.csv" + suffix)]
    write_panel(raw, paths[0])
    n, t = data.y.shape
    pd.DataFrame({
        "household": np.repeat(raw.household_id, t),
        "year": raw.year.ravel(),
        "U": truth[..., 0].ravel(),
        "V": truth[..., 1].ravel(),
    }).to_csv(paths[1], index=False, float_format="%.17g")
    return paths
