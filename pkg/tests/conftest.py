import numpy as np
import pytest

from lmp.sieve import HermiteBasis, QuantileSieve, TauGrid


def random_sieve(rng, degree_lag=3, degree_age=2, n_knots=11, spread=1.0):
    """A sieve whose knot quantiles increase in tau near the basis centre.

    The intercepts climb in tau; higher-order coefficients are small, so
    crossings (and rearrangement) only occur far from the centre.
    """
    basis = HermiteBasis(
        degree_lag=degree_lag,
        degree_age=degree_age,
        lag_center=rng.normal(0, 0.5),
        lag_scale=rng.uniform(0.5, 2.0),
        age_center=40.0,
        age_scale=10.0,
    )
    grid = TauGrid.uniform(n_knots)
    coeffs = 0.05 * spread * rng.standard_normal((n_knots, basis.n_terms))
    coeffs[:, 0] = np.cumsum(rng.uniform(0.05, 0.5, n_knots)) * spread
    coeffs[:, 0] -= coeffs[:, 0].mean()
    if degree_lag >= 1:
        coeffs[:, 1] += rng.uniform(-1.0, 1.0)
    return QuantileSieve(basis, grid, coeffs, rng.uniform(0.5, 4.0), rng.uniform(0.5, 4.0))


def identity_sieve(n_knots=11, lam_low=1.0, lam_high=1.0, degree_lag=0, degree_age=0):
    """Q(tau_l | x) = tau_l at every conditioning point."""
    grid = TauGrid.uniform(n_knots)
    basis = HermiteBasis(degree_lag=degree_lag, degree_age=degree_age)
    return QuantileSieve.from_knot_values(basis, grid, grid.knots, lam_low, lam_high)


@pytest.fixture
def rng():
    return np.random.default_rng(20261018)
