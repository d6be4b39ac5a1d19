"""Conditional quantile functions represented as Hermite sieves.

A sieve stores, for every knot tau_l of an equi-spaced grid, the
coefficients of a tensor-product Hermite basis in (lagged state, age).
Between knots the quantile function is linear in tau; below the first
and above the last knot it has exponential tails, so every sieve
implies a proper density that can be evaluated in closed form.

Crossing knot values are repaired at evaluation time by sorting
(monotone rearrangement); coefficients are never constrained.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.polynomial.hermite_e import hermevander

# bins narrower than this get a capped density
MIN_BIN_WIDTH = 1e-10


@dataclass(frozen=True)
class TauGrid:
    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1 or len(knots) < 2:
            raise ValueError("a tau grid needs at least two knots")
        if knots[0] <= 0.0 or knots[-1] >= 1.0:
            raise ValueError("knots must lie strictly inside (0, 1)")
        steps = np.diff(knots)
        if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
            raise ValueError("knots must be strictly increasing and equi-spaced")
        object.__setattr__(self, "knots", knots)

    @classmethod
    def uniform(cls, n_knots: int = 11) -> "TauGrid":
        """Knots l/(L+1), l = 1..L. The default L=11 puts a knot at 11/12."""
        return cls(np.arange(1, n_knots + 1) / (n_knots + 1))

    def __len__(self):
        return len(self.knots)

    def __eq__(self, other):
        return isinstance(other, TauGrid) and np.array_equal(self.knots, other.knots)

    def __hash__(self):
        return hash(self.knots.tobytes())


def hermite(x, degree: int) -> np.ndarray:
    """Probabilists' Hermite polynomials He_0..He_degree at x, shape (n, degree+1)."""
    return hermevander(np.asarray(x, dtype=float), degree)


def hermite_derivative(x, degree: int) -> np.ndarray:
    """d/dx He_n(x) = n He_{n-1}(x)."""
    values = hermite(x, max(degree - 1, 0))
    out = np.zeros(np.shape(x) + (degree + 1,))
    if degree > 0:
        out[..., 1:] = values[..., :degree] * np.arange(1, degree + 1)
    return out


@dataclass(frozen=True)
class HermiteBasis:
    """Tensor basis He_a(std lag) * He_b(std age).

    Column k = b * (degree_lag + 1) + a, so the age index varies slowest.
    ``degree_lag = 0`` gives an age-only basis (initial conditions).
    ``lag_bounds`` clamps the raw lag before evaluation, so a polynomial
    fitted on a bounded sample extrapolates flat instead of exploding.
    """

    degree_lag: int = 3
    degree_age: int = 2
    lag_center: float = 0.0
    lag_scale: float = 1.0
    age_center: float = 0.0
    age_scale: float = 1.0
    lag_bounds: tuple | None = None

    def __post_init__(self):
        if self.degree_lag < 0 or self.degree_age < 0:
            raise ValueError("degrees must be non-negative")
        if not (self.lag_scale > 0 and self.age_scale > 0):
            raise ValueError("standardizer scales must be positive")
        if self.lag_bounds is not None:
            lo, hi = (float(b) for b in self.lag_bounds)
            if not lo <= hi:
                raise ValueError("lag_bounds must satisfy low <= high")
            object.__setattr__(self, "lag_bounds", (lo, hi))

    @property
    def n_terms(self) -> int:
        return (self.degree_lag + 1) * (self.degree_age + 1)

    def _std(self, lag, age):
        lag = np.asarray(lag, dtype=float)
        if self.lag_bounds is not None:
            lag = np.clip(lag, *self.lag_bounds)
        lag = (lag - self.lag_center) / self.lag_scale
        age = (np.asarray(age, dtype=float) - self.age_center) / self.age_scale
        return np.broadcast_arrays(np.atleast_1d(lag), np.atleast_1d(age))

    def _tensor(self, lag_part, age_part):
        n = lag_part.shape[0]
        return (age_part[:, :, None] * lag_part[:, None, :]).reshape(n, self.n_terms)

    def design(self, lag, age) -> np.ndarray:
        """Basis evaluated at n points, shape (n, K)."""
        x, a = self._std(lag, age)
        return self._tensor(hermite(x, self.degree_lag), hermite(a, self.degree_age))

    def design_dlag(self, lag, age) -> np.ndarray:
        """Derivative of every basis column with respect to the raw lag."""
        x, a = self._std(lag, age)
        dlag = hermite_derivative(x, self.degree_lag) / self.lag_scale
        if self.lag_bounds is not None:
            raw = np.broadcast_to(np.atleast_1d(np.asarray(lag, dtype=float)), x.shape)
            outside = (raw < self.lag_bounds[0]) | (raw > self.lag_bounds[1])
            dlag[outside] = 0.0
        return self._tensor(dlag, hermite(a, self.degree_age))

    def to_dict(self) -> dict:
        return {
            "degree_lag": self.degree_lag,
            "degree_age": self.degree_age,
            "lag_center": self.lag_center,
            "lag_scale": self.lag_scale,
            "age_center": self.age_center,
            "age_scale": self.age_scale,
            "lag_bounds": None if self.lag_bounds is None else list(self.lag_bounds),
        }


def basis_eval(basis: HermiteBasis, lag_state: float, age: float) -> np.ndarray:
    return basis.design(lag_state, age)[0]


def rearrange(knot_values) -> np.ndarray:
    """Monotone rearrangement: sort along the last axis."""
    return np.sort(np.asarray(knot_values, dtype=float), axis=-1)


@dataclass(frozen=True)
class QuantileSieve:
    basis: HermiteBasis
    grid: TauGrid
    coeffs: np.ndarray
    tail_lambda_low: float = 1.0
    tail_lambda_high: float = 1.0

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=float)
        if coeffs.shape != (len(self.grid), self.basis.n_terms):
            raise ValueError(
                f"coeffs shape {coeffs.shape} != ({len(self.grid)}, {self.basis.n_terms})"
            )
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("sieve coefficients must be finite")
        for lam in (self.tail_lambda_low, self.tail_lambda_high):
            if not (np.isfinite(lam) and lam > 0):
                raise ValueError("tail parameters must be finite and positive")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)

    # -- knot values -------------------------------------------------------

    def raw_knot_values(self, lag, age) -> np.ndarray:
        return self.basis.design(lag, age) @ self.coeffs.T

    def knot_values(self, lag, age) -> np.ndarray:
        """Rearranged knot quantiles Q(tau_l | x), shape (n, L)."""
        return np.sort(self.raw_knot_values(lag, age), axis=1)

    def knot_derivatives(self, lag, age) -> np.ndarray:
        """d/d lag of the rearranged knot quantiles, shape (n, L)."""
        raw = self.raw_knot_values(lag, age)
        order = np.argsort(raw, axis=1, kind="stable")
        deriv = self.basis.design_dlag(lag, age) @ self.coeffs.T
        return np.take_along_axis(deriv, order, axis=1)

    # -- quantiles ---------------------------------------------------------

    def _interp_tau(self, knots_q, tau):
        tk = self.grid.knots
        tau = np.broadcast_to(np.asarray(tau, dtype=float), knots_q.shape[:1])
        if np.any((tau <= 0) | (tau >= 1)) or np.any(np.isnan(tau)):
            raise ValueError("tau must lie in (0, 1)")
        j = np.clip(np.searchsorted(tk, tau, side="right") - 1, 0, len(tk) - 2)
        w = np.clip((tau - tk[j]) / (tk[j + 1] - tk[j]), 0.0, 1.0)
        rows = np.arange(len(tau))
        q = (1.0 - w) * knots_q[rows, j] + w * knots_q[rows, j + 1]
        lo = tau < tk[0]
        hi = tau > tk[-1]
        q = np.where(lo, knots_q[:, 0] + np.log(np.where(lo, tau, tk[0]) / tk[0]) / self.tail_lambda_low, q)
        q = np.where(
            hi,
            knots_q[:, -1] + np.log((1 - tk[-1]) / (1 - np.where(hi, tau, tk[-1]))) / self.tail_lambda_high,
            q,
        )
        return q, j, w, lo, hi

    def quantile(self, tau, lag, age) -> np.ndarray:
        """Q(tau | lag, age), vectorized over broadcast inputs."""
        tau, lag, age = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=float)) for v in (tau, lag, age)))
        q, *_ = self._interp_tau(self.knot_values(lag, age), tau)
        return q

    def quantile_dlag(self, tau, lag, age) -> np.ndarray:
        """Analytic derivative of Q(tau | lag, age) with respect to lag."""
        tau, lag, age = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=float)) for v in (tau, lag, age)))
        _, j, w, lo, hi = self._interp_tau(self.knot_values(lag, age), tau)
        d = self.knot_derivatives(lag, age)
        rows = np.arange(len(tau))
        out = (1.0 - w) * d[rows, j] + w * d[rows, j + 1]
        out = np.where(lo, d[:, 0], out)
        return np.where(hi, d[:, -1], out)

    # -- density and cdf ---------------------------------------------------

    def _bins(self, value, knots_q):
        return (knots_q <= value[:, None]).sum(axis=1)

    def log_density(self, value, lag, age) -> np.ndarray:
        value, lag, age = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=float)) for v in (value, lag, age)))
        knots_q = self.knot_values(lag, age)
        return self._log_density_from_knots(value, knots_q)

    def _log_density_from_knots(self, value, knots_q):
        tk = self.grid.knots
        n_knots = len(tk)
        idx = self._bins(value, knots_q)
        seg = np.clip(idx - 1, 0, n_knots - 2)
        rows = np.arange(len(value))
        width = np.maximum(knots_q[rows, seg + 1] - knots_q[rows, seg], MIN_BIN_WIDTH)
        dtau = tk[seg + 1] - tk[seg]
        out = np.log(dtau) - np.log(width)
        lam_lo, lam_hi = self.tail_lambda_low, self.tail_lambda_high
        low = np.log(lam_lo * tk[0]) + lam_lo * (value - knots_q[:, 0])
        high = np.log(lam_hi * (1 - tk[-1])) - lam_hi * (value - knots_q[:, -1])
        out = np.where(idx == 0, low, out)
        return np.where(idx == n_knots, high, out)

    def density(self, value, lag, age) -> np.ndarray:
        return np.exp(self.log_density(value, lag, age))

    def cdf(self, value, lag, age) -> np.ndarray:
        value, lag, age = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=float)) for v in (value, lag, age)))
        knots_q = self.knot_values(lag, age)
        tk = self.grid.knots
        idx = self._bins(value, knots_q)
        seg = np.clip(idx - 1, 0, len(tk) - 2)
        rows = np.arange(len(value))
        q0, q1 = knots_q[rows, seg], knots_q[rows, seg + 1]
        width = np.maximum(q1 - q0, MIN_BIN_WIDTH)
        inner = tk[seg] + (tk[seg + 1] - tk[seg]) * np.clip((value - q0) / width, 0.0, 1.0)
        low = tk[0] * np.exp(np.minimum(self.tail_lambda_low * (value - knots_q[:, 0]), 0.0))
        high = 1.0 - (1 - tk[-1]) * np.exp(-np.maximum(self.tail_lambda_high * (value - knots_q[:, -1]), 0.0))
        out = np.where(idx == 0, low, inner)
        return np.where(idx == len(tk), high, out)

    def conditional_mean(self, lag, age) -> np.ndarray:
        """E[X | lag, age]: exact integral of the piecewise-linear quantile plus tails."""
        knots_q = self.knot_values(lag, age)
        tk = self.grid.knots
        inner = np.sum(0.5 * (knots_q[:, 1:] + knots_q[:, :-1]) * np.diff(tk), axis=1)
        low = tk[0] * (knots_q[:, 0] - 1.0 / self.tail_lambda_low)
        high = (1 - tk[-1]) * (knots_q[:, -1] + 1.0 / self.tail_lambda_high)
        return inner + low + high

    def sample(self, lag, age, u) -> np.ndarray:
        """Inverse-CDF draw: Q(u | lag, age)."""
        return self.quantile(u, lag, age)

    # -- construction and serialization -------------------------------------

    def with_coeffs(self, coeffs, tail_lambda_low=None, tail_lambda_high=None) -> "QuantileSieve":
        return replace(
            self,
            coeffs=coeffs,
            tail_lambda_low=self.tail_lambda_low if tail_lambda_low is None else tail_lambda_low,
            tail_lambda_high=self.tail_lambda_high if tail_lambda_high is None else tail_lambda_high,
        )

    @classmethod
    def from_knot_values(cls, basis, grid, knot_values, tail_lambda_low=1.0, tail_lambda_high=1.0):
        """Sieve whose knot quantiles are constant in the conditioning variables."""
        coeffs = np.zeros((len(grid), basis.n_terms))
        coeffs[:, 0] = knot_values
        return cls(basis, grid, coeffs, tail_lambda_low, tail_lambda_high)

    def to_dict(self) -> dict:
        return {
            "grid": [float(t) for t in self.grid.knots],
            "degrees": {"lag": self.basis.degree_lag, "age": self.basis.degree_age},
            "standardizers": {
                "lag": [self.basis.lag_center, self.basis.lag_scale],
                "age": [self.basis.age_center, self.basis.age_scale],
            },
            "lag_bounds": None if self.basis.lag_bounds is None else list(self.basis.lag_bounds),
            "coeffs": [float(c) for c in self.coeffs.ravel()],
            "tail_lambdas": [self.tail_lambda_low, self.tail_lambda_high],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QuantileSieve":
        basis = HermiteBasis(
            degree_lag=int(data["degrees"]["lag"]),
            degree_age=int(data["degrees"]["age"]),
            lag_center=float(data["standardizers"]["lag"][0]),
            lag_scale=float(data["standardizers"]["lag"][1]),
            age_center=float(data["standardizers"]["age"][0]),
            age_scale=float(data["standardizers"]["age"][1]),
            lag_bounds=data.get("lag_bounds"),
        )
        grid = TauGrid(np.array(data["grid"], dtype=float))
        coeffs = np.array(data["coeffs"], dtype=float).reshape(len(grid), basis.n_terms)
        low, high = data["tail_lambdas"]
        return cls(basis, grid, coeffs, float(low), float(high))


def eval_quantile(sieve: QuantileSieve, tau: float, lag_state: float, age: float) -> float:
    return float(sieve.quantile(tau, lag_state, age)[0])


def implied_density(sieve: QuantileSieve, value: float, lag_state: float, age: float) -> float:
    return float(sieve.density(value, lag_state, age)[0])


def sample(sieve: QuantileSieve, lag_state: float, age: float, u: float) -> float:
    return float(sieve.sample(lag_state, age, u)[0])
