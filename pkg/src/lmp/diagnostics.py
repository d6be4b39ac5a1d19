"""Empirical objects computed from data, latent draws or fitted parameters.

* persistence surfaces: average derivative of Q(tau_shock | x) in the lag x,
  evaluated at the tau_init quantile of the conditioning states;
* conditional skewness and tail weight from the quantile function;
* marginal densities of U and V at a fixed age (simulation + KDE);
* growth moments of y at horizons 2..8, with an ARCH slope;
* normalization deviations of the fitted kernels.

Skewness is quantile-based (Bowley form with tau and 1 - tau tails);
kurtosis curves are the tail-weight ratio of the outer to the inner
quantile spread, which equals 1.0 for a distribution whose 1 - tau
to tau range matches its interquartile range.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .msem import ModelParams, fit_sieve
from .panel_io import PanelDataset
from .sieve import HermiteBasis, QuantileSieve, TauGrid
from .simulator import simulate_paths

TARGETS = ("y", "U", "V")
COMPONENTS = ("U", "V")
DEFAULT_HORIZONS = tuple(range(2, 9))
KDE_POINTS = 512
KDE_SPAN = 5.0


def twelfths(interior: int = 9) -> np.ndarray:
    """Interior grid of 12ths: 2/12..10/12 for the default 9 points."""
    skip = (11 - interior) // 2
    return np.arange(1 + skip, 12 - skip) / 12


def _check_taus(taus, name):
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    if taus.size == 0 or np.any((taus <= 0) | (taus >= 1)) or np.any(np.isnan(taus)):
        raise ValueError(f"{name} must be non-empty with values in (0, 1)")
    return taus


# ---------------------------------------------------------------------------
# persistence


@dataclass
class PersistenceSurface:
    """values[a, b] = average dQ(tau_shock[b] | x) / dx at x = q_{tau_init[a]}."""

    tau_init_grid: np.ndarray
    tau_shock_grid: np.ndarray
    values: np.ndarray
    target: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.tau_init_grid), len(self.tau_shock_grid)):
            raise ValueError("surface values do not match its grids")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("surface values must be finite")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "tau_init": self.tau_init_grid.tolist(),
            "tau_shock": self.tau_shock_grid.tolist(),
            "values": self.values.tolist(),
        }

    def rows(self):
        for a, ti in enumerate(self.tau_init_grid):
            for b, ts in enumerate(self.tau_shock_grid):
                yield ti, ts, self.values[a, b]


def persistence_surface(sieve: QuantileSieve, state_draws, tau_init_grid, tau_shock_grid, age,
                        target: str = "U") -> PersistenceSurface:
    """Analytic lag derivative of the conditional quantile on a (tau_init, tau_shock) grid.

    ``age`` may be a scalar or an array of ages; in the latter case the
    derivative is averaged over them.
    """
    draws = np.asarray(state_draws, dtype=float).ravel()
    if draws.size == 0:
        raise ValueError("state_draws is empty")
    tau_init = _check_taus(tau_init_grid, "tau_init_grid")
    tau_shock = _check_taus(tau_shock_grid, "tau_shock_grid")
    ages = np.atleast_1d(np.asarray(age, dtype=float))
    states = np.quantile(draws, tau_init)

    lag = np.repeat(states, len(tau_shock))
    tau = np.tile(tau_shock, len(states))
    values = np.zeros(len(lag))
    for a in ages:
        values += sieve.quantile_dlag(tau, lag, a)
    values = (values / len(ages)).reshape(len(states), len(tau_shock))
    return PersistenceSurface(tau_init, tau_shock, values, target)


def pair_sieve(data: PanelDataset, degree_lag: int = 3, degree_age: int = 2, n_knots: int = 11,
               tol: float = 1e-8) -> QuantileSieve:
    """Auxiliary quantile sieve of y_t given (y_{t-1}, age_t)."""
    y = np.asarray(data.y)
    basis = HermiteBasis(degree_lag, degree_age, float(y.mean()), float(y.std()) or 1.0,
                         data.age_mean, data.age_sd)
    return fit_sieve(basis, TauGrid.uniform(n_knots), y[:, 1:], y[:, :-1], np.asarray(data.age)[:, 1:], tol=tol)


# ---------------------------------------------------------------------------
# conditional shape


def conditional_skewness(sieve: QuantileSieve, cond_quantiles, tau: float = 11 / 12, age: float = 0.0) -> np.ndarray:
    """[Q(tau|x) + Q(1-tau|x) - 2 Q(1/2|x)] / [Q(tau|x) - Q(1-tau|x)] at each x."""
    if not 0.5 < tau < 1.0:
        raise ValueError("tau must lie in (0.5, 1)")
    x = np.atleast_1d(np.asarray(cond_quantiles, dtype=float))
    hi = sieve.quantile(tau, x, age)
    lo = sieve.quantile(1 - tau, x, age)
    mid = sieve.quantile(0.5, x, age)
    spread = hi - lo
    if np.any(spread <= 0):
        raise ValueError("degenerate conditional distribution: zero quantile spread")
    return (hi + lo - 2 * mid) / spread


def conditional_tail_weight(sieve: QuantileSieve, cond_quantiles, tau: float = 11 / 12, inner: float = 0.75,
                            age: float = 0.0) -> np.ndarray:
    """[Q(tau|x) - Q(1-tau|x)] / [Q(inner|x) - Q(1-inner|x)] at each x."""
    if not 0.5 < inner < tau < 1.0:
        raise ValueError("need 0.5 < inner < tau < 1")
    x = np.atleast_1d(np.asarray(cond_quantiles, dtype=float))
    outer = sieve.quantile(tau, x, age) - sieve.quantile(1 - tau, x, age)
    middle = sieve.quantile(inner, x, age) - sieve.quantile(1 - inner, x, age)
    if np.any(middle <= 0):
        raise ValueError("degenerate conditional distribution: zero quantile spread")
    return outer / middle


# ---------------------------------------------------------------------------
# marginal densities


@dataclass
class MarginalDensity:
    component: str
    age: float
    grid: np.ndarray
    density: np.ndarray
    mean: float
    sd: float
    excess_kurtosis: float

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid"] = self.grid.tolist()
        out["density"] = self.density.tolist()
        return out


def kde_grid(sample, n_points: int = KDE_POINTS, span: float = KDE_SPAN) -> np.ndarray:
    sample = np.asarray(sample, dtype=float)
    center, sd = float(sample.mean()), float(sample.std()) or 1.0
    return np.linspace(center - span * sd, center + span * sd, n_points)


def kde(sample, grid=None):
    """Gaussian KDE with Silverman's bandwidth on ``grid`` (default: mean +- 5 sd)."""
    sample = np.asarray(sample, dtype=float).ravel()
    grid = kde_grid(sample) if grid is None else np.asarray(grid, dtype=float)
    return grid, stats.gaussian_kde(sample, bw_method="silverman")(grid)


def simulated_component(params: ModelParams, component: str, age: float, n_sim: int, seed: int = 0,
                        n_periods: int = 6) -> np.ndarray:
    """n_sim pooled draws of U or V from paths simulated at a fixed age."""
    if component not in COMPONENTS:
        raise ValueError(f"component must be one of {COMPONENTS}")
    n = -(-n_sim // n_periods)
    u, v, _ = simulate_paths(params, n, n_periods, (float(age), 0.0), seed)
    paths = u if component == "U" else v
    return paths.ravel()[:n_sim]


def marginal_density(params: ModelParams, component: str, age: float, grid=None, n_sim: int = 100_000,
                     seed: int = 0, n_periods: int = 6) -> MarginalDensity:
    if n_sim < 1000:
        raise ValueError("n_sim must be >= 1000")
    draws = simulated_component(params, component, age, n_sim, seed, n_periods)
    grid, dens = kde(draws, grid)
    return MarginalDensity(
        component, float(age), grid, dens, float(draws.mean()), float(draws.std()),
        float(stats.kurtosis(draws, fisher=True)),
    )


# ---------------------------------------------------------------------------
# growth moments


@dataclass
class GrowthMoments:
    horizon: int
    n_obs: int
    variance: float
    skewness: float
    kurtosis: float
    arch_slope: float | None
    arch_se: float | None
    grid: np.ndarray = field(repr=False)
    density: np.ndarray = field(repr=False)

    @property
    def arch_sign(self) -> int | None:
        return None if self.arch_slope is None else int(np.sign(self.arch_slope))

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "n_obs": self.n_obs,
            "variance": self.variance,
            "skewness": self.skewness,
            "kurtosis": self.kurtosis,
            "arch_slope": self.arch_slope,
            "arch_se": self.arch_se,
            "arch_sign": self.arch_sign,
            "grid": self.grid.tolist(),
            "density": self.density.tolist(),
        }


def cluster_ols_slope(x, y, groups):
    """OLS slope of y on [1, x] with a household-clustered standard error."""
    x, y = np.ravel(x), np.ravel(y)
    design = np.column_stack([np.ones_like(x), x])
    bread = np.linalg.inv(design.T @ design)
    coef = bread @ design.T @ y
    resid = y - design @ coef
    scores = design * resid[:, None]
    _, inverse = np.unique(np.ravel(groups), return_inverse=True)
    summed = np.zeros((inverse.max() + 1, 2))
    np.add.at(summed, inverse, scores)
    cov = bread @ (summed.T @ summed) @ bread
    return float(coef[1]), float(np.sqrt(cov[1, 1]))


def growth_moments(data: PanelDataset, horizons=DEFAULT_HORIZONS) -> dict:
    """Moments of y_{t+h} - y_t pooled over households and t, per horizon.

    The ARCH slope regresses (Delta_h y_t)^2 on (Delta_h y_{t-1})^2; the two
    differences share no endpoint, so the slope is zero for i.i.d. y.
    """
    y = np.asarray(data.y, dtype=float)
    n, t = y.shape
    out = {}
    for h in sorted(set(int(h) for h in horizons)):
        if h < 1:
            raise ValueError("horizons must be positive")
        if h >= t:
            raise ValueError(f"horizon {h} exceeds the panel span of {t - 1} periods")
        growth = y[:, h:] - y[:, :-h]
        pooled = growth.ravel()
        slope = se = None
        if growth.shape[1] >= 2:
            sq = growth**2
            groups = np.repeat(np.arange(n), growth.shape[1] - 1)
            slope, se = cluster_ols_slope(sq[:, :-1], sq[:, 1:], groups)
        grid, dens = kde(pooled)
        out[h] = GrowthMoments(
            h, pooled.size, float(pooled.var()), float(stats.skew(pooled)),
            float(stats.kurtosis(pooled, fisher=False)), slope, se, grid, dens,
        )
    return out


# ---------------------------------------------------------------------------
# normalization


def normalization_deviation(params: ModelParams, n_sim: int = 10_000, seed: int = 0, n_periods: int = 6,
                            age_profile=None) -> dict:
    """Mean |E[U'|U] - U| and |E[V'|V]| over simulated states.

    States are pooled transitions from paths simulated with ``age_profile``
    (default: the U kernel's mean age, held fixed).
    """
    if age_profile is None:
        age_profile = (params.sieve_U.basis.age_center, 0.0)
    n = -(-n_sim // (n_periods - 1))
    u, v, age = simulate_paths(params, n, n_periods, age_profile, seed)
    lag_u, lag_v = (a[:, :-1].ravel()[:n_sim] for a in (u, v))
    nxt = age[:, 1:].ravel()[:n_sim]
    dev_u = params.sieve_U.conditional_mean(lag_u, nxt) - lag_u
    dev_v = params.sieve_V.conditional_mean(lag_v, nxt)
    return {"U": float(np.mean(np.abs(dev_u))), "V": float(np.mean(np.abs(dev_v)))}


# ---------------------------------------------------------------------------
# report


@dataclass
class DiagnosticsOptions:
    tau_init_grid: tuple = tuple(twelfths())
    tau_shock_grid: tuple = tuple(twelfths())
    skew_tau: float = 11 / 12
    percentiles: tuple = tuple(np.round(np.arange(1, 10) / 10, 10))
    n_sim: int = 100_000
    n_periods: int = 6
    horizons: tuple = DEFAULT_HORIZONS
    average_ages: bool = False
    seed: int = 0

    def __post_init__(self):
        _check_taus(self.tau_init_grid, "tau_init_grid")
        _check_taus(self.tau_shock_grid, "tau_shock_grid")
        _check_taus(self.percentiles, "percentiles")
        if not 0.5 < self.skew_tau < 1:
            raise ValueError("skew_tau must lie in (0.5, 1)")
        if self.n_sim < 1000:
            raise ValueError("n_sim must be >= 1000")
        if self.n_periods < 2:
            raise ValueError("n_periods must be >= 2")
        self.tau_init_grid = tuple(float(x) for x in self.tau_init_grid)
        self.tau_shock_grid = tuple(float(x) for x in self.tau_shock_grid)
        self.percentiles = tuple(float(x) for x in self.percentiles)
        self.horizons = tuple(int(h) for h in self.horizons)


@dataclass
class DiagnosticsReport:
    surfaces: list
    skewness_curves: dict
    kurtosis_curves: dict
    marginal_densities: dict
    growth_moments: dict
    normalization_deviation: dict

    def surface(self, target: str) -> PersistenceSurface:
        for s in self.surfaces:
            if s.target == target:
                return s
        raise KeyError(target)

    def to_dict(self) -> dict:
        return {
            "surfaces": [s.to_dict() for s in self.surfaces],
            "skewness_curves": self.skewness_curves,
            "kurtosis_curves": self.kurtosis_curves,
            "marginal_densities": {k: d.to_dict() for k, d in self.marginal_densities.items()},
            "growth_moments": {str(h): g.to_dict() for h, g in self.growth_moments.items()},
            "normalization_deviation": self.normalization_deviation,
        }

    def to_json(self) -> str:
        # allow_nan=False: a non-finite diagnostic is an invariant failure
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    def write(self, out_dir, suffix: str = "") -> list:
        """report.json plus one CSV per surface, curve, density and horizon."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / ("report.json" + suffix)]
        written[0].write_text(self.to_json())

        def table(name, header, rows):
            path = out / (name + suffix)
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(header)
                writer.writerows([[repr(float(v)) for v in row] for row in rows])
            written.append(path)

        for s in self.surfaces:
            table(f"surface_{s.target}.csv", ["tau_init", "tau_shock", "value"], s.rows())
        for kind, curves in (("skewness", self.skewness_curves), ("kurtosis", self.kurtosis_curves)):
            for comp, curve in curves.items():
                table(f"{kind}_{comp}.csv", ["percentile", "state", "value"],
                      zip(curve["percentiles"], curve["states"], curve["values"]))
        for comp, d in self.marginal_densities.items():
            table(f"density_{comp}.csv", ["value", "density"], zip(d.grid, d.density))
        for h, g in self.growth_moments.items():
            table(f"growth_h{h}.csv", ["value", "density"], zip(g.grid, g.density))
        moments = [(g.horizon, g.variance, g.skewness, g.kurtosis,
                    np.nan if g.arch_slope is None else g.arch_slope,
                    np.nan if g.arch_se is None else g.arch_se) for g in self.growth_moments.values()]
        table("growth_moments.csv", ["horizon", "variance", "skewness", "kurtosis", "arch_slope", "arch_se"], moments)
        return written


def build_report(params: ModelParams, data: PanelDataset | None = None,
                 options: DiagnosticsOptions | None = None) -> DiagnosticsReport:
    """Every diagnostic for fitted ``params``; y-based objects need ``data``."""
    options = options or DiagnosticsOptions()
    age = data.age_mean if data is not None else params.sieve_U.basis.age_center
    ages = np.unique(np.asarray(data.age)) if (data is not None and options.average_ages) else age
    n = -(-options.n_sim // options.n_periods)
    u, v, _ = simulate_paths(params, n, options.n_periods, (float(age), 0.0), options.seed)
    states = {"U": u[:, :-1].ravel(), "V": v[:, :-1].ravel()}
    sieves = {"U": params.sieve_U, "V": params.sieve_V}

    surfaces = []
    if data is not None:
        y = np.asarray(data.y)
        aux = pair_sieve(data, params.sieve_U.basis.degree_lag, params.sieve_U.basis.degree_age,
                         len(params.sieve_U.grid))
        surfaces.append(persistence_surface(aux, y[:, :-1], options.tau_init_grid, options.tau_shock_grid,
                                            ages, target="y"))
    for comp in COMPONENTS:
        surfaces.append(persistence_surface(sieves[comp], states[comp], options.tau_init_grid,
                                            options.tau_shock_grid, ages, target=comp))

    pct = np.asarray(options.percentiles)
    skew, kurt = {}, {}
    for comp in COMPONENTS:
        x = np.quantile(states[comp], pct)
        skew[comp] = {"percentiles": pct.tolist(), "states": x.tolist(),
                      "values": conditional_skewness(sieves[comp], x, options.skew_tau, age).tolist()}
        kurt[comp] = {"percentiles": pct.tolist(), "states": x.tolist(),
                      "values": conditional_tail_weight(sieves[comp], x, options.skew_tau, age=age).tolist()}

    densities = {}
    for comp, draws in (("U", u.ravel()), ("V", v.ravel())):
        draws = draws[: options.n_sim]
        grid, dens = kde(draws)
        densities[comp] = MarginalDensity(comp, float(age), grid, dens, float(draws.mean()), float(draws.std()),
                                          float(stats.kurtosis(draws, fisher=True)))

    growth = {}
    if data is not None:
        horizons = [h for h in options.horizons if h < data.n_periods]
        growth = growth_moments(data, horizons)

    norm_dev = normalization_deviation(params, options.n_sim, options.seed, options.n_periods)
    return DiagnosticsReport(surfaces, skew, kurt, densities, growth, norm_dev)
