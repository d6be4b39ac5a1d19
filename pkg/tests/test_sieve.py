import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from lmp.sieve import (
    HermiteBasis,
    QuantileSieve,
    TauGrid,
    basis_eval,
    eval_quantile,
    hermite,
    implied_density,
    rearrange,
    sample,
)

from conftest import identity_sieve, random_sieve

EXPLICIT_HERMITE = [
    lambda x: np.ones_like(x),
    lambda x: x,
    lambda x: x**2 - 1,
    lambda x: x**3 - 3 * x,
    lambda x: x**4 - 6 * x**2 + 3,
]


def test_default_grid_has_skewness_knot():
    grid = TauGrid.uniform()
    assert len(grid) == 11
    assert np.isclose(grid.knots, 11 / 12).any()
    assert np.isclose(grid.knots, 0.5).any()


@pytest.mark.parametrize("knots", [[0.0, 0.5], [0.2, 0.3, 0.5], [0.5, 0.4], [0.5, 1.0]])
def test_grid_validation(knots):
    with pytest.raises(ValueError):
        TauGrid(np.array(knots))


def test_basis_at_center():
    basis = HermiteBasis(degree_lag=2, degree_age=1, lag_center=1.5, lag_scale=2.0, age_center=40.0, age_scale=5.0)
    assert np.array_equal(basis_eval(basis, 1.5, 40.0), [1.0, 0.0, -1.0, 0.0, 0.0, -0.0])


def test_basis_known_values():
    basis = HermiteBasis(degree_lag=3, degree_age=0)
    assert basis_eval(basis, 1.0, 0.0)[2] == 0.0
    assert basis_eval(basis, 2.0, 0.0)[3] == 2.0


@settings(max_examples=200)
@given(st.floats(-5, 5, allow_nan=False))
def test_hermite_matches_explicit_polynomials(x):
    values = hermite(np.array([x]), 4)[0]
    for n, poly in enumerate(EXPLICIT_HERMITE):
        expected = poly(np.array(x))
        assert values[n] == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_basis_tensor_order(rng):
    basis = HermiteBasis(degree_lag=3, degree_age=2, lag_center=0.3, lag_scale=1.7, age_center=45, age_scale=11)
    lag, age = rng.normal(size=20), rng.uniform(25, 60, 20)
    x, a = (lag - 0.3) / 1.7, (age - 45) / 11
    design = basis.design(lag, age)
    for b in range(3):
        for k in range(4):
            expected = EXPLICIT_HERMITE[k](x) * EXPLICIT_HERMITE[b](a)
            assert np.allclose(design[:, b * 4 + k], expected, rtol=1e-12, atol=1e-12)


def test_basis_lag_derivative_matches_finite_difference(rng):
    basis = HermiteBasis(degree_lag=3, degree_age=2, lag_center=0.1, lag_scale=0.8, age_center=40, age_scale=10)
    lag, age = rng.normal(size=10), rng.uniform(25, 60, 10)
    h = 1e-5
    fd = (basis.design(lag + h, age) - basis.design(lag - h, age)) / (2 * h)
    assert np.allclose(basis.design_dlag(lag, age), fd, atol=1e-7)


def test_identity_sieve_quantiles():
    sieve = identity_sieve()
    assert eval_quantile(sieve, 0.5, 0.0, 0.0) == pytest.approx(0.5)
    for tau in sieve.grid.knots:
        assert eval_quantile(sieve, tau, 0.0, 0.0) == tau
    assert eval_quantile(sieve, 0.3, 0.0, 0.0) == pytest.approx(0.3)


def test_lower_tail_closed_form():
    sieve = identity_sieve(lam_low=1.0)
    q1 = sieve.grid.knots[0]
    assert eval_quantile(sieve, 0.02, 0.0, 0.0) == pytest.approx(q1 + np.log(0.24), rel=1e-14)


def test_upper_tail_closed_form():
    sieve = identity_sieve(lam_high=2.0)
    q_top = sieve.grid.knots[-1]
    tau = 0.99
    expected = q_top + np.log((1 / 12) / (1 - tau)) / 2.0
    assert eval_quantile(sieve, tau, 0.0, 0.0) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, 1.5, np.nan])
def test_quantile_rejects_bad_tau(tau):
    with pytest.raises(ValueError):
        eval_quantile(identity_sieve(), tau, 0.0, 0.0)


def test_identity_density_inside():
    assert implied_density(identity_sieve(), 0.5, 0.0, 0.0) == pytest.approx(1.0)


@pytest.mark.parametrize("value", [1.0, 1.3, 2.5])
def test_upper_tail_density(value):
    sieve = identity_sieve(lam_high=2.0)
    q_top = 11 / 12
    assert implied_density(sieve, value, 0.0, 0.0) == pytest.approx((2 / 12) * np.exp(-2 * (value - q_top)), rel=1e-12)


def _integrate_density(sieve, lag, age):
    knots_q = sieve.knot_values(lag, age)[0]

    def pdf(v):
        return sieve.density(v, lag, age)[0]

    inner = 0.0
    for lo, hi in zip(knots_q[:-1], knots_q[1:]):
        if hi > lo:
            inner += integrate.quad(pdf, lo, hi, epsabs=1e-12, epsrel=1e-12)[0]
    low = integrate.quad(pdf, -np.inf, knots_q[0], epsabs=1e-13)[0]
    high = integrate.quad(pdf, knots_q[-1], np.inf, epsabs=1e-13)[0]
    tk = sieve.grid.knots
    return inner, low, high, tk[0], 1 - tk[-1]


@pytest.mark.parametrize("seed", range(10))
def test_density_integrates_to_one(seed):
    rng = np.random.default_rng(seed)
    sieve = random_sieve(rng)
    inner, low, high, mass_low, mass_high = _integrate_density(sieve, rng.normal(), rng.uniform(25, 60))
    assert inner + mass_low + mass_high == pytest.approx(1.0, abs=1e-6)
    assert low == pytest.approx(mass_low, abs=1e-8)
    assert high == pytest.approx(mass_high, abs=1e-8)


def test_degenerate_bin_density_is_capped():
    grid = TauGrid.uniform(5)
    basis = HermiteBasis(0, 0)
    sieve = QuantileSieve.from_knot_values(basis, grid, [0.0, 1.0, 1.0, 2.0, 3.0])
    value = sieve.density(1.0 - 1e-12, 0.0, 0.0)[0]
    assert np.isfinite(value)
    at_tie = sieve.log_density(np.array([1.0]), 0.0, 0.0)[0]
    assert np.isfinite(at_tie)
    assert at_tie <= np.log((1 / 6) / 1e-10) + 1e-9


def test_sample_matches_quantile(rng):
    sieve = random_sieve(rng)
    for u in (0.01, 0.2, 0.5, 0.93):
        assert sample(sieve, 0.3, 41.0, u) == eval_quantile(sieve, u, 0.3, 41.0)
    assert sample(identity_sieve(), 0.0, 0.0, 0.5) == pytest.approx(0.5)
    tau = identity_sieve().grid.knots[3]
    assert sample(identity_sieve(), 0.0, 0.0, tau) == tau


@pytest.mark.parametrize("seed", range(3))
def test_sampler_kolmogorov_distance(seed):
    rng = np.random.default_rng(seed)
    sieve = random_sieve(rng)
    lag, age = 0.2, 37.0
    draws = sieve.sample(lag, age, rng.random(100_000))
    result = stats.kstest(draws, lambda x: sieve.cdf(x, lag, age))
    assert result.statistic < 0.01


def test_cdf_agrees_with_integrated_density(rng):
    sieve = random_sieve(rng)
    lag, age = -0.4, 50.0
    knots_q = sieve.knot_values(lag, age)[0]
    for point in np.linspace(knots_q[0] - 1, knots_q[-1] + 1, 7):
        pieces = np.sort(np.r_[knots_q[knots_q < point], point])
        area = integrate.quad(lambda v: sieve.density(v, lag, age)[0], -np.inf, pieces[0])[0]
        for lo, hi in zip(pieces[:-1], pieces[1:]):
            area += integrate.quad(lambda v: sieve.density(v, lag, age)[0], lo, hi)[0]
        assert sieve.cdf(point, lag, age)[0] == pytest.approx(area, abs=1e-7)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), taus=st.lists(st.floats(1 / 12 + 1e-6, 11 / 12 - 1e-6), min_size=1, max_size=20))
def test_cdf_inverts_quantile(seed, taus):
    rng = np.random.default_rng(seed)
    sieve = random_sieve(rng)
    lag, age = rng.normal(), rng.uniform(25, 60)
    taus = np.array(taus)
    q = sieve.quantile(taus, lag, age)
    knots_q = sieve.knot_values(lag, age)[0]
    # flat stretches of a rearranged sieve have no unique inverse
    if np.min(np.diff(knots_q)) > 1e-8:
        assert np.allclose(sieve.cdf(q, lag, age), taus, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t1=st.floats(1e-6, 1 - 1e-6), t2=st.floats(1e-6, 1 - 1e-6))
def test_quantile_monotone_in_tau(seed, t1, t2):
    rng = np.random.default_rng(seed)
    sieve = random_sieve(rng, spread=rng.uniform(0.1, 3))
    # far from the centre knots cross and get rearranged
    lag, age = rng.normal(0, 3), rng.uniform(20, 70)
    lo, hi = min(t1, t2), max(t1, t2)
    assert sieve.quantile(lo, lag, age)[0] <= sieve.quantile(hi, lag, age)[0]


def test_rearrange_examples():
    assert np.array_equal(rearrange([1, 3, 2]), [1, 2, 3])
    assert np.array_equal(rearrange([-1.0, 0.0, 4.0]), [-1.0, 0.0, 4.0])


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=30))
def test_rearrange_properties(values):
    out = rearrange(values)
    assert np.all(np.diff(out) >= 0)
    assert np.array_equal(rearrange(out), out)
    assert sorted(values) == list(out)


def test_sieve_json_round_trip(rng):
    sieve = random_sieve(rng)
    text = json.dumps(sieve.to_dict())
    back = QuantileSieve.from_dict(json.loads(text))
    assert np.array_equal(back.coeffs, sieve.coeffs)
    assert back.basis == sieve.basis
    assert back.grid == sieve.grid
    assert (back.tail_lambda_low, back.tail_lambda_high) == (sieve.tail_lambda_low, sieve.tail_lambda_high)


def test_sieve_validation():
    grid = TauGrid.uniform(5)
    basis = HermiteBasis(1, 0)
    with pytest.raises(ValueError, match="shape"):
        QuantileSieve(basis, grid, np.zeros((5, 3)))
    with pytest.raises(ValueError, match="positive"):
        QuantileSieve(basis, grid, np.zeros((5, 2)), tail_lambda_low=0.0)
    with pytest.raises(ValueError, match="finite"):
        QuantileSieve(basis, grid, np.full((5, 2), np.nan))


def test_conditional_mean_matches_quadrature(rng):
    sieve = random_sieve(rng)
    lag, age = 0.5, 33.0
    value = integrate.quad(lambda t: sieve.quantile(t, lag, age)[0], 0, 1, limit=200, points=list(sieve.grid.knots))[0]
    assert sieve.conditional_mean(lag, age)[0] == pytest.approx(value, abs=1e-7)


def test_lag_bounds_extrapolate_flat(rng):
    from dataclasses import replace

    sieve = random_sieve(rng)
    bounded = replace(sieve, basis=replace(sieve.basis, lag_bounds=(-1.0, 1.5)))
    taus = np.array([0.1, 0.5, 0.9])
    for lag in (-7.0, -1.0, 0.3, 1.5, 40.0):
        inside = float(np.clip(lag, -1.0, 1.5))
        assert np.array_equal(bounded.quantile(taus, lag, 40.0), sieve.quantile(taus, inside, 40.0))
    assert np.all(bounded.quantile_dlag(taus, 3.0, 40.0) == 0.0)
    assert np.array_equal(bounded.quantile_dlag(taus, 0.3, 40.0), sieve.quantile_dlag(taus, 0.3, 40.0))
    again = QuantileSieve.from_dict(json.loads(json.dumps(bounded.to_dict())))
    assert again.basis.lag_bounds == (-1.0, 1.5)
    with pytest.raises(ValueError, match="lag_bounds"):
        replace(sieve.basis, lag_bounds=(2.0, 1.0))
