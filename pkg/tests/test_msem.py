import json

import numpy as np
import pytest
from scipy import integrate
from scipy.special import expit, log_expit
from scipy.stats import norm

from lmp import msem
from lmp.msem import (
    ModelParams,
    MsemConfig,
    MsemDivergence,
    MsemState,
    complete_data_loglik,
    estep_sample,
    initial_draws,
    mh_sweeps,
    model_bases,
    mstep_update,
    path_loglik,
    run_msem,
)
from lmp.panel_io import PanelDataset
from lmp.sieve import HermiteBasis, QuantileSieve, TauGrid
from lmp.simulator import DgpSpec, simulate_canonical, simulate_from_model, skew_reversal_params


def constant_sieve(grid, values, lam=1.0):
    return QuantileSieve.from_knot_values(HermiteBasis(0, 0), grid, values, lam, lam)


def flat_params(grid, u_values, v_values, beta0=0.0, beta1=0.0, lam=1.0):
    u = constant_sieve(grid, u_values, lam)
    v = constant_sieve(grid, v_values, lam)
    return ModelParams(u, v, u, v, beta0, beta1)


def dataset(y, instrument=None, age=None):
    y = np.asarray(y, dtype=float)
    age = np.broadcast_to(30.0 + np.arange(y.shape[1]), y.shape).astype(float) if age is None else age
    instrument = np.zeros(y.shape, dtype=int) if instrument is None else instrument
    return PanelDataset(y=y, age=age, instrument=instrument, age_mean=float(age.mean()), age_sd=float(age.std()) or 1.0)


# -- complete-data likelihood ------------------------------------------------


def test_loglik_hand_computed_two_periods():
    grid = TauGrid.uniform(11)
    # U kernels: Q = 2 tau (density 1/2 inside); V kernels: identity (density 1)
    params = flat_params(grid, 2 * grid.knots, grid.knots, beta0=0.2, beta1=1.0)
    u = np.array([0.3, 0.4])
    y = np.array([0.8, 0.9])
    omega = np.array([1, 0])
    expected = 2 * np.log(0.5) + 2 * np.log(1.0) + log_expit(0.5) + log_expit(-0.6)
    assert complete_data_loglik(params, u, y, np.zeros(2), omega) == pytest.approx(expected, rel=1e-12)


def test_loglik_tail_term_hand_computed():
    grid = TauGrid.uniform(11)
    params = flat_params(grid, grid.knots, grid.knots, lam=2.0)
    # u_1 below the first U knot, everything else interior
    u = np.array([-0.5, 0.5])
    y = np.array([0.0, 1.0])
    tail = np.log(2.0 * grid.knots[0]) + 2.0 * (-0.5 - grid.knots[0])
    expected = tail + 3 * 0.0 + 2 * np.log(0.5)
    assert complete_data_loglik(params, u, y, np.zeros(2), np.zeros(2)) == pytest.approx(expected, rel=1e-12)


def test_flat_instrument_is_independent_of_u(rng):
    grid = TauGrid.uniform(11)
    params = flat_params(grid, norm.ppf(grid.knots), norm.ppf(grid.knots), beta0=0.7, beta1=0.0)
    y = rng.normal(size=5)
    omega = rng.integers(0, 2, 5)
    age = np.zeros(5)
    for u in (rng.normal(size=5), rng.normal(size=5)):
        no_instrument = ModelParams(*params.sieves(), beta0=0.0, beta1=0.0)
        base = complete_data_loglik(no_instrument, u, y, age, np.zeros(5)) - 5 * log_expit(0.0)
        total = complete_data_loglik(params, u, y, age, omega)
        expected = np.sum(omega * np.log(expit(0.7)) + (1 - omega) * np.log(1 - expit(0.7)))
        assert total - base == pytest.approx(expected, rel=1e-12)


def test_tail_path_has_lower_loglik():
    grid = TauGrid.uniform(11)
    params = flat_params(grid, norm.ppf(grid.knots), norm.ppf(grid.knots), lam=2.0)
    y = np.zeros(5)
    interior = path_loglik(params, np.zeros(5), y, np.zeros(5), np.zeros(5))[0]
    tails = path_loglik(params, np.full(5, 4.0), y, np.zeros(5), np.zeros(5))[0]
    assert tails < interior


def test_loglik_finite_with_degenerate_bins():
    grid = TauGrid.uniform(5)
    params = flat_params(grid, [0.0, 0.0, 0.0, 1.0, 2.0], [0.0, 1.0, 2.0, 3.0, 4.0])
    value = complete_data_loglik(params, np.zeros(5), np.ones(5), np.zeros(5), np.zeros(5))
    assert np.isfinite(value)


# -- E-step ------------------------------------------------------------------


def gaussian_target_setup(n_households=1000, n_periods=5):
    grid = TauGrid(np.arange(1, 100) / 100)
    u_knots = norm.ppf(grid.knots)
    # V kernels nearly flat on [-50, 50]: the target is the U kernel alone
    v_knots = np.linspace(-50, 50, len(grid))
    u = constant_sieve(grid, u_knots, lam=1.0 / (norm.pdf(u_knots[-1]) / norm.sf(u_knots[-1]) - u_knots[-1]))
    v = constant_sieve(grid, v_knots)
    params = ModelParams(u, v, u, v, 0.0, 0.0)
    data = dataset(np.zeros((n_households, n_periods)))
    return params, data


def sieve_moments(sieve):
    """Mean and variance of a lag-free sieve by integrating its quantile function."""
    knots = list(sieve.grid.knots)

    def q(t):
        return sieve.quantile(t, 0.0, 0.0)[0]

    mean = integrate.quad(q, 0, 1, points=knots, limit=400)[0]
    second = integrate.quad(lambda t: q(t) ** 2, 0, 1, points=knots, limit=400)[0]
    return mean, second - mean**2


def test_known_target_moments():
    params, data = gaussian_target_setup()
    target_mean, target_var = sieve_moments(params.sieve_U)
    assert abs(target_mean) < 1e-9 and abs(target_var - 1) < 0.01

    config = MsemConfig(mh_steps_per_estep=5, mh_proposal_sd=1.5, seed=11)
    state = MsemState(params=params, latent_draws=initial_draws(data, 1))
    pooled = []
    for it in range(25):
        state.iteration = it
        state.latent_draws, _ = estep_sample(state, data, config)
        if it >= 5:
            pooled.append(state.latent_draws.ravel())
    draws = np.concatenate(pooled)
    assert len(draws) == 100_000
    assert abs(draws.mean() - target_mean) < 0.02
    assert 0.95 <= draws.var() <= 1.05


def test_tiny_proposal_barely_moves():
    params, data = gaussian_target_setup(n_households=50)
    start = np.random.default_rng(0).normal(size=(50, 5, 1))
    state = MsemState(params=params, latent_draws=start)
    config = MsemConfig(mh_steps_per_estep=10, mh_proposal_sd=1e-9, seed=1)
    draws, rate = estep_sample(state, data, config)
    assert rate > 0.99
    assert np.max(np.abs(draws - start)) < 1e-7


def test_acceptance_rule_matches_full_path_likelihood(rng):
    grid = TauGrid.uniform(11)
    params = flat_params(grid, 0.3 * norm.ppf(grid.knots), 0.2 * norm.ppf(grid.knots), beta0=0.1, beta1=2.0)
    n, t = 40, 5
    y = rng.normal(0, 0.4, (n, t))
    omega = rng.integers(0, 2, (n, t)).astype(float)
    age = np.zeros((n, t))
    u0 = y / 2
    normals = rng.normal(0, 0.3, (n, 1, t))
    uniforms = rng.random((n, 1, t))
    got, _, _ = mh_sweeps(params, u0, y, age, omega, 1, normals, uniforms)

    expected = u0.copy()
    for site in range(t):
        proposal = expected.copy()
        proposal[:, site] += normals[:, 0, site]
        delta = path_loglik(params, proposal, y, age, omega) - path_loglik(params, expected, y, age, omega)
        accept = uniforms[:, 0, site] < np.minimum(1.0, np.exp(delta))
        expected[accept, site] = proposal[accept, site]
    assert np.allclose(got, expected, atol=1e-12)


def _small_problem(n=60, seed=3):
    spec = DgpSpec(n_households=n, n_periods=5, instrument_beta=(0.0, 3.0), seed=seed)
    data, truth = simulate_canonical(spec)
    config = MsemConfig(n_outer=2, n_draws=2, mh_steps_per_estep=3, seed=5, degree_lag=2, degree_age=1, degree_age_initial=1)
    return data, truth, config


def test_estep_is_deterministic_and_thread_invariant():
    data, _, config = _small_problem(n=600)
    params = msem.unconditional_init(data, config)
    state = MsemState(params=params, latent_draws=initial_draws(data, config.n_draws))
    a, rate_a = estep_sample(state, data, config)
    b, rate_b = estep_sample(state, data, config)
    config.threads = 3
    c, rate_c = estep_sample(state, data, config)
    assert np.array_equal(a, b) and np.array_equal(a, c)
    assert rate_a == rate_b == rate_c


def test_estep_draws_depend_only_on_own_household():
    data, _, config = _small_problem(n=40)
    # the default proposal scale depends on sd(y) of the whole panel
    config.mh_proposal_sd = 0.05
    params = msem.unconditional_init(data, config)
    full = estep_sample(MsemState(params, initial_draws(data, 2)), data, config)[0]
    head = dataset(data.y[:10], data.instrument[:10], data.age[:10])
    part = estep_sample(MsemState(params, initial_draws(head, 2)), head, config)[0]
    assert np.allclose(part, full[:10], rtol=0, atol=1e-12)


# -- M-step ------------------------------------------------------------------


def test_mstep_recovers_linear_gaussian_quantiles():
    rng = np.random.default_rng(42)
    n, t, rho, sd = 4000, 5, 0.5, 0.5
    u = np.empty((n, t))
    u[:, 0] = rng.normal(0, sd / np.sqrt(1 - rho**2), n)
    for s in range(1, t):
        u[:, s] = rho * u[:, s - 1] + rng.normal(0, sd, n)
    v = rng.normal(0, 0.3, (n, t))
    omega = (rng.random((n, t)) < expit(2 * u)).astype(int)
    data = dataset(u + v, omega)
    config = MsemConfig(n_knots=11, degree_lag=3, degree_age=2)
    params = mstep_update(u[:, :, None], data, config)

    lag = np.linspace(-0.8, 0.8, 9)
    age = np.full_like(lag, data.age_mean)
    fitted = params.sieve_U.knot_values(lag, age)
    truth = rho * lag[:, None] + sd * norm.ppf(params.sieve_U.grid.knots)[None, :]
    assert np.max(np.abs(fitted - truth)) < 0.05
    assert params.beta1 == pytest.approx(2.0, abs=0.15)


def test_mstep_duplicated_draws_match_single():
    data, truth, config = _small_problem()
    single = mstep_update(truth[:, :, :1], data, config)
    double = mstep_update(np.repeat(truth[:, :, :1], 2, axis=2), data, config)
    assert json.dumps(single.to_dict()) == json.dumps(double.to_dict())


def test_mstep_zero_transitory_draws():
    data, _, config = _small_problem()
    params = mstep_update(np.asarray(data.y)[:, :, None], data, config)
    points = np.linspace(-0.2, 0.2, 5)
    knots = params.sieve_V.knot_values(points, np.full(5, data.age_mean))
    assert np.max(np.abs(knots)) < 1e-8
    assert np.max(np.abs(params.sieve_V1.knot_values(0.0, data.age_mean))) < 1e-8


def test_mstep_normalizes_transitory_kernels():
    data, truth, config = _small_problem()
    params = mstep_update(truth[:, :, :1] + 0.3, data, config)
    for sieve in (params.sieve_V, params.sieve_V1):
        center = sieve.knot_values(sieve.basis.lag_center, sieve.basis.age_center)
        assert abs(center.mean()) < 1e-8


def test_model_bases_share_grid_and_standardizers():
    data, _, config = _small_problem()
    b_u, b_v, b_u1, b_v1 = model_bases(data, config)
    assert b_u.lag_scale == b_v.lag_scale == pytest.approx(np.std(data.y))
    assert b_u1.degree_lag == b_v1.degree_lag == 0
    params = mstep_update(initial_draws(data, 1), data, config)
    assert len({s.grid for s in params.sieves()}) == 1


# -- outer loop --------------------------------------------------------------


def test_single_iteration_is_one_e_and_one_m_step():
    data, _, config = _small_problem()
    config.n_outer, config.n_draws, config.averaging_window = 1, 1, 1
    init = msem.unconditional_init(data, config)
    params, state = run_msem(data, config, init=init)
    draws, _ = estep_sample(MsemState(init, initial_draws(data, 1)), data, config)
    manual = mstep_update(draws, data, config)
    assert np.array_equal(state.latent_draws, draws)
    assert json.dumps(params.to_dict()) == json.dumps(manual.to_dict())


def test_run_is_deterministic_across_threads():
    data, _, config = _small_problem()
    a, sa = run_msem(data, config)
    b, sb = run_msem(data, config)
    config.threads = 2
    c, sc = run_msem(data, config)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict()) == json.dumps(c.to_dict())
    assert sa.loglik_trace == sb.loglik_trace == sc.loglik_trace
    assert sa.surrogate_loss_trace == sb.surrogate_loss_trace == sc.surrogate_loss_trace
    assert len(sa.loglik_trace) == config.n_outer


def test_averaging_window():
    data, _, config = _small_problem()
    config.n_outer = 3
    params, state = run_msem(data, config)
    assert config.window() == 2
    expected = ModelParams.average(state.param_history[-2:])
    assert json.dumps(params.to_dict()) == json.dumps(expected.to_dict())


def test_checkpoint_and_resume(tmp_path):
    data, _, config = _small_problem()
    path = tmp_path / "ckpt.json"
    run_msem(data, config, checkpoint=path)
    saved = json.loads(path.read_text())
    assert saved["iteration"] == 2 and len(saved["loglik_trace"]) == 2
    config.n_outer = 4
    params, state = run_msem(data, config, resume=path)
    assert state.iteration == 4
    assert len(state.loglik_trace) == 4 and len(state.param_history) == 4
    assert state.loglik_trace[:2] == saved["loglik_trace"]


def test_non_finite_trace_aborts(monkeypatch):
    data, _, config = _small_problem()
    monkeypatch.setattr(msem, "mean_loglik", lambda *a: float("nan"))
    with pytest.raises(MsemDivergence) as err:
        run_msem(data, config)
    assert err.value.dump["iteration"] == 0
    assert "params" in err.value.dump


def test_params_json_round_trip(tmp_path):
    params = skew_reversal_params()
    params.save(tmp_path / "p.json")
    back = ModelParams.load(tmp_path / "p.json")
    assert json.dumps(back.to_dict()) == json.dumps(params.to_dict())


def test_config_validation():
    with pytest.raises(ValueError):
        MsemConfig(n_outer=0)
    with pytest.raises(ValueError):
        MsemConfig(mh_proposal_sd=0.0)
    with pytest.raises(ValueError):
        MsemConfig(burn_in_fraction=1.0)
    assert MsemConfig(n_outer=7).window() == 4


def test_unknown_init_rejected():
    data, _, config = _small_problem()
    with pytest.raises(ValueError, match="unknown init"):
        run_msem(data, config, init="random")


@pytest.mark.slow
def test_self_consistency_from_truth():
    truth = skew_reversal_params(beta=(0.0, 4.0))
    data, latent = simulate_from_model(truth, 1000, 6, seed=17, return_truth=True)
    config = MsemConfig(n_outer=20, n_draws=1, mh_steps_per_estep=20, seed=4)
    params, state = run_msem(data, config, init=truth)

    lag = np.quantile(latent[:, :-1, 0], np.linspace(0.1, 0.9, 9))
    age = np.full_like(lag, data.age_mean)
    drift = np.abs(params.sieve_U.knot_values(lag, age) - truth.sieve_U.knot_values(lag, age))
    assert drift.max() < 0.1

    # surrogate loss: no upward trend after burn-in beyond Monte Carlo noise
    tail = np.array(state.surrogate_loss_trace[len(state.surrogate_loss_trace) // 2:])
    x = np.arange(len(tail), dtype=float)
    slope, intercept = np.polyfit(x, tail, 1)
    resid = tail - (slope * x + intercept)
    se = np.sqrt(np.sum(resid**2) / (len(x) - 2) / np.sum((x - x.mean()) ** 2))
    assert slope <= 2 * se


def test_mstep_bounds_transition_kernels_to_draw_support():
    data, truth, config = _small_problem()
    draws = truth[:, :, :1]
    params = mstep_update(draws, data, config)
    u, v = draws[:, :-1], data.y[:, :-1, None] - draws[:, :-1]
    assert params.sieve_U.basis.lag_bounds == tuple(np.quantile(u, msem.LAG_SUPPORT, method="inverted_cdf"))
    assert params.sieve_V.basis.lag_bounds == tuple(np.quantile(v, msem.LAG_SUPPORT, method="inverted_cdf"))
    assert params.sieve_U1.basis.lag_bounds is None
    half = mstep_update(0.5 * draws, data, config)
    pair = ModelParams.average([params, half])
    lo, hi = np.quantile(u, msem.LAG_SUPPORT, method="inverted_cdf")
    assert pair.sieve_U.basis.lag_bounds == pytest.approx((max(lo, 0.5 * lo), min(hi, 0.5 * hi)))


# -- moment start ------------------------------------------------------------


def test_difference_moments_recover_random_walk_plus_noise():
    spec = DgpSpec(n_households=20_000, n_periods=6, sigma_eta=0.15, transitory_scale=0.10, seed=4)
    data, _ = simulate_canonical(spec)
    m = msem.difference_moments(data)
    assert m["var_v"] == pytest.approx(0.01, rel=0.1)
    assert m["var_eta"] == pytest.approx(0.0225, rel=0.1)
    assert m["var_u1"] == pytest.approx(0.0225, rel=0.1)


def test_difference_moments_floor_on_noise_free_walk():
    # a pure random walk has cov(dy_t, dy_{t-1}) near 0, possibly positive
    y = np.cumsum(np.random.default_rng(4).normal(0, 0.15, (500, 6)), axis=1)
    data = dataset(y + 0.02 * np.arange(6))
    m = msem.difference_moments(data)
    assert m["var_v"] >= 1e-3 * np.var(data.y)
    assert m["var_eta"] > 0 and m["var_u1"] > 0


def test_moment_start_is_gaussian_random_walk_plus_noise():
    data, _, config = _small_problem(n=400)
    params = msem.moment_init(data, config)
    m = msem.difference_moments(data)
    z = norm.ppf(params.sieve_U.grid.knots)
    for lag in (-0.3, 0.0, 0.4):
        assert np.allclose(params.sieve_U.knot_values(lag, 35.0)[0], lag + np.sqrt(m["var_eta"]) * z)
        assert np.allclose(params.sieve_V.knot_values(lag, 35.0)[0], np.sqrt(m["var_v"]) * z)
    assert np.allclose(params.sieve_U1.knot_values(0.0, 35.0)[0], m["mean_u1"] + np.sqrt(m["var_u1"]) * z)
    assert params.beta1 > 0
    assert msem.initial_params(data, config).to_dict() == params.to_dict()
