import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from mmlrt.censored_exp import (
    GUMBEL_MEDIAN,
    LOG_4PI,
    CensExpModel,
    CensExpSample,
    ThetaSearch,
    censored_monte_carlo,
    cov_scores,
    density,
    gumbel_cdf,
    gumbel_center,
    lambda_sup,
    local_stationarity_estimate,
    long_range_ratio,
    profile_lambda,
    ratio,
    read_sample,
    rho,
    sample_censored,
    score_statistic,
    theta_of,
    v_theta,
    write_sample,
)
from mmlrt.streams import stream

E1 = math.exp(-1.0)


def quad_moment(th1, th2, T):
    """E0[r1 r2] - 1 by quadrature of the defining integral (mpmath, 30 digits)."""
    with mp.workdps(30):
        f = lambda x: th1 * th2 * mp.e ** (-(th1 + th2 - 1) * x)
        cont = mp.quad(f, [0, T])
        atom = mp.e ** (-(th1 + th2 - 1) * T)
        return float(cont + atom - 1)


# Density and ratio


def test_density_examples():
    m = CensExpModel(1.0, 1.0)
    assert density(1.0, m) == pytest.approx(E1, abs=1e-15)
    assert density(0.5, m) == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert density(1.5, m) == 0.0
    assert density(0.0, m) == 0.0


def test_density_total_mass():
    m = CensExpModel(2.5, 0.7)
    cont, _ = quad(lambda x: density(x, m), 0, 0.7)
    assert cont + density(0.7, m) == pytest.approx(1.0, abs=1e-12)


def test_model_validation():
    with pytest.raises(ValueError):
        CensExpModel(0.0, 1.0)
    with pytest.raises(ValueError):
        CensExpModel(1.0, -1.0)


def test_sample_validation():
    with pytest.raises(ValueError):
        CensExpSample(np.array([0.5, 1.5]), 1.0)
    with pytest.raises(ValueError):
        CensExpSample(np.array([0.0, 0.5]), 1.0)


def test_ratio_examples():
    x = np.linspace(0.01, 1.0, 7)
    np.testing.assert_array_equal(ratio(x, 1.0, 1.0), 1.0)
    assert ratio(1.0, 2.0, 1.0) == pytest.approx(E1, abs=1e-15)
    assert ratio(0.25, 3.0, 1.0) == pytest.approx(3 * math.exp(-0.5), abs=1e-15)


def test_ratio_null_mean_is_one():
    s = sample_censored(1.0, 1.0, 200_000, stream(1))
    r = ratio(s.x, 3.0, 1.0)
    assert abs(r.mean() - 1) < 3 * r.std() / math.sqrt(r.size)


# Variance and covariance


def test_v_theta_examples():
    assert v_theta(1.0, 1.0) == 0.0
    assert v_theta(0.5, 1.0) == pytest.approx(0.25, abs=1e-15)
    assert v_theta(2.0, 1.0) == pytest.approx((1 - math.exp(-3)) / 3, abs=1e-15)


@pytest.mark.parametrize("T", [0.5, 1.0, 5.0])
def test_v_theta_matches_quadrature(T):
    thetas = np.r_[np.geomspace(0.05, 50, 41), 0.5 - 1e-4, 0.5, 0.5 + 1e-4]
    for th in thetas:
        assert v_theta(th, T) == pytest.approx(quad_moment(th, th, T), abs=1e-10)


def test_cov_scores_examples():
    assert cov_scores(1.0, 3.0, 1.0) == 0.0
    assert cov_scores(2.0, 1.0, 1.0) == 0.0
    assert cov_scores(2.0, 2.0, 1.0) == pytest.approx(v_theta(2.0, 1.0), abs=1e-15)
    assert cov_scores(1.5, 3.0, 1.0) == pytest.approx(quad_moment(1.5, 3.0, 1.0), abs=1e-10)


def test_cov_scores_matches_quadrature_grid():
    grid = np.geomspace(0.05, 50, 9)
    for a in grid:
        for b in grid:
            assert cov_scores(a, b, 1.0) == pytest.approx(quad_moment(a, b, 1.0), abs=1e-10)


def test_v_theta_series_branch_continuity():
    # a = 2 theta - 1 just inside and just outside the series cutoff 1e-4,
    # on both sides of theta = 1/2; every value must match the exact moment.
    for T in (0.5, 1.0, 5.0):
        for a in (1e-4 * 0.999, 1e-4 * 1.001, -1e-4 * 0.999, -1e-4 * 1.001, 2e-4, -2e-4):
            th = (1 + a) / 2
            assert v_theta(th, T) == pytest.approx(quad_moment(th, th, T), abs=1e-12)


def test_v_theta_uncensored():
    assert v_theta(2.0, math.inf) == pytest.approx(1 / 3, abs=1e-15)
    assert v_theta(0.5, math.inf) == math.inf


@settings(max_examples=200, deadline=None)
@given(a=st.floats(0.01, 100), b=st.floats(0.01, 100), T=st.floats(0.01, 20))
def test_cov_scores_cauchy_schwarz(a, b, T):
    c = cov_scores(a, b, T)
    assert c * c <= v_theta(a, T) * v_theta(b, T) * (1 + 1e-12) + 1e-300


# Correlation


def test_rho_examples():
    assert rho(0.3, 0.3) == pytest.approx(1.0, abs=1e-15)
    assert rho(0.3, 0.3, 1.0) == pytest.approx(1.0, abs=1e-15)
    assert rho(0.0, 1.0) == pytest.approx(2 / (math.exp(0.5) + math.exp(-0.5)), abs=1e-15)
    assert rho(0.0, 1.0) == pytest.approx(0.886819, abs=1e-6)


@pytest.mark.parametrize("T", [0.5, 1.0, 5.0])
def test_rho_identity_grid(T):
    s = np.linspace(-2, 4, 50)
    S, U = np.meshgrid(s, s, indexing="ij")
    lhs = rho(S, U, T) * np.sqrt(v_theta(theta_of(S), T) * v_theta(theta_of(U), T))
    rhs = cov_scores(theta_of(S), theta_of(U), T)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_rho_sign_across_null():
    # theta(s) < 1 and theta(t) > 1: the scores move in opposite directions.
    s, t = math.log(0.25), math.log(1.5)
    assert rho(s, t, 1.0) < 0
    assert rho(s, t, 1.0) == pytest.approx(
        cov_scores(theta_of(s), theta_of(t), 1.0) / math.sqrt(v_theta(theta_of(s), 1.0) * v_theta(theta_of(t), 1.0)),
        abs=1e-12)


def test_rho_uncensored_limit():
    s = np.linspace(-1, 2, 31)
    S, U = np.meshgrid(s, s, indexing="ij")
    assert np.max(np.abs(rho(S, U, 50.0) - rho(S, U))) < 1e-12


def test_rho_uncensored_limit_at_negative_s():
    # At s = -2 the censoring factor decays like e^{-2 T e^{-2}}, so T = 50
    # is not yet in the limit; the difference still shrinks with T.
    gaps = [abs(rho(-2.0, 2.0, T) - rho(-2.0, 2.0)) for T in (25.0, 50.0, 100.0, 200.0)]
    assert gaps[0] > gaps[1] > gaps[2] >= gaps[3]
    assert gaps[1] > 1e-12
    assert gaps[3] < 1e-12


# Local stationarity


@pytest.mark.parametrize("t", [-2.0, 0.0, 1.5, 4.0])
def test_local_stationarity_uncensored(t):
    ratios, limit = local_stationarity_estimate(t)
    assert limit == pytest.approx(0.125, abs=1e-6)
    assert ratios[-1] == pytest.approx(0.125, abs=1e-4)


def test_local_stationarity_censored_positive():
    ts = np.linspace(-2, 4, 61)
    V = np.array([local_stationarity_estimate(t, 1.0)[1] for t in ts])
    assert np.all(np.isfinite(V))
    # Slow rates are barely distinguishable before the horizon, so V falls
    # toward 0 as t decreases; on this grid it stays within these bounds.
    assert V.min() > 5e-4
    assert V.max() < 0.13
    assert np.all(np.diff(V) >= 0)


@pytest.mark.parametrize("t", [-2.0, -0.5, 0.0, 2.0])
def test_local_stationarity_censored_matches_second_derivative(t):
    # V(t) = -rho''(0) / 2 for d -> rho(t, t + d), differentiated in 40 digits.
    with mp.workdps(40):
        T, tt = mp.mpf(1), mp.mpf(t)

        def r(d):
            es, et = mp.e ** tt, mp.e ** (tt + d)
            cens = (1 - mp.e ** (-T * (es + et))) / mp.sqrt((1 - mp.e ** (-2 * T * es)) * (1 - mp.e ** (-2 * T * et)))
            return cens / mp.cosh(d / 2)

        oracle = float(-mp.diff(r, 0, 2) / 2)
    assert local_stationarity_estimate(t, 1.0)[1] == pytest.approx(oracle, abs=1e-8)


def test_local_stationarity_rejects_bad_deltas():
    with pytest.raises(ValueError):
        local_stationarity_estimate(0.0, None, [0.1, -0.1])


def test_long_range():
    assert long_range_ratio(20.0) == pytest.approx(2.0, abs=1e-8)
    assert abs(long_range_ratio(20.0) - 2) < abs(long_range_ratio(10.0) - 2)


# Score statistic


def test_score_statistic_example():
    s = CensExpSample(np.array([1.0]), 1.0)
    expected = (E1 - 1) / math.sqrt((1 - math.exp(-3)) / 3)
    assert score_statistic(s, 2.0) == pytest.approx(expected, abs=1e-12)
    assert score_statistic(s, 2.0) == pytest.approx(-1.1231818, abs=1e-7)


def test_score_statistic_zero_when_ratio_is_one():
    # r(x; 2) = 2 e^{-x} = 1 at x = log 2.
    s = CensExpSample(np.full(5, math.log(2.0)), 1.0)
    assert score_statistic(s, 2.0) == pytest.approx(0.0, abs=1e-14)


def test_score_statistic_undefined_at_null():
    with pytest.raises(ValueError):
        score_statistic(CensExpSample(np.array([0.5]), 1.0), 1.0)


def test_score_statistic_null_moments():
    vals = np.array([score_statistic(sample_censored(1.0, 1.0, 200, stream(2, i)), 2.5) for i in range(2000)])
    assert abs(vals.mean()) < 3 * vals.std() / math.sqrt(vals.size)
    # Var of the sample variance is about 2 / reps for near-normal values.
    assert abs(vals.var() - 1) < 3 * math.sqrt(2 / vals.size)


# Profile in p


def test_profile_flat():
    s = CensExpSample(np.full(4, math.log(2.0)), 1.0)
    lam, p = profile_lambda(s, 2.0)
    assert lam == pytest.approx(0.0, abs=1e-14)
    assert p == 0.0


def test_profile_single_point_boundary():
    s = CensExpSample(np.array([0.1]), 1.0)
    lam, p = profile_lambda(s, 3.0)
    assert p == 1.0
    assert lam == pytest.approx(math.log(3.0) - 2.0 * 0.1, abs=1e-14)


def test_profile_nonpositive_slope():
    s = CensExpSample(np.array([0.9, 1.0, 1.0]), 1.0)
    assert float(np.sum(ratio(s.x, 4.0, 1.0) - 1)) <= 0
    assert profile_lambda(s, 4.0) == (0.0, 0.0)


def _brute_profile(x, T, thetas):
    """Independent profile: bisection on the score equation, 100 halvings."""
    y = np.expm1(np.where(x[None, :] == T, -(thetas[:, None] - 1) * T,
                          np.log(thetas[:, None]) - (thetas[:, None] - 1) * x[None, :]))
    g = lambda p: (y / (1 + p[:, None] * y)).sum(axis=1)
    m = thetas.size
    lo, hi = np.zeros(m), np.ones(m)
    with np.errstate(divide="ignore", invalid="ignore"):
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            up = g(mid) > 0
            lo = np.where(up, mid, lo)
            hi = np.where(up, hi, mid)
        p = np.where(y.sum(axis=1) <= 0, 0.0, lo)
        p = np.where(np.nan_to_num(g(np.ones(m)), nan=-1.0) >= 0, 1.0, p)
        val = np.log1p(p[:, None] * y).sum(axis=1)
    return np.where(np.isnan(val), -np.inf, val), p


def test_profile_matches_brute_force():
    s = sample_censored(1.0, 1.0, 15, stream(31))
    thetas = np.geomspace(0.05, 100, 200)
    brute, _ = _brute_profile(s.x, 1.0, thetas)
    ours = np.array([profile_lambda(s, th)[0] for th in thetas])
    np.testing.assert_allclose(ours, brute, atol=1e-11)


def test_profile_when_newton_hits_root_exactly():
    # Newton lands on a point where the derivative is exactly zero.
    s = sample_censored(1.0, 1.0, 5, stream(505, 5))
    brute, p = _brute_profile(s.x, 1.0, np.array([0.2]))
    lam, ph = profile_lambda(s, 0.2)
    assert lam == pytest.approx(brute[0], abs=1e-12)
    assert ph == pytest.approx(p[0], abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 30), th=st.floats(0.02, 200))
def test_profile_nonnegative(seed, n, th):
    s = sample_censored(1.3, 1.0, n, stream(seed))
    lam, p = profile_lambda(s, th)
    assert lam >= 0 and 0 <= p <= 1
    assert (lam == 0) == (p == 0)


# Supremum over theta


def brute_sup(sample, points=100_000):
    search = ThetaSearch.default(sample.n, sample.T)
    thetas = np.geomspace(search.theta_min, search.theta_max, points)
    vals = np.concatenate([_brute_profile(sample.x, sample.T, c)[0] for c in np.array_split(thetas, 20)])
    return float(vals.max())


@pytest.mark.parametrize("seed", range(5))
def test_lambda_sup_matches_brute_force(seed):
    n = 5 + 3 * seed
    s = sample_censored(1.0, 1.0, n, stream(seed, 404))
    assert lambda_sup(s).lam == pytest.approx(brute_sup(s), abs=1e-6)


def test_lambda_sup_all_censored():
    s = CensExpSample(np.ones(10), 1.0)
    res = lambda_sup(s)
    search = ThetaSearch.default(10, 1.0)
    # All ratios equal e^{-(theta-1)}: the profile increases as theta decreases.
    assert res.theta_hat == pytest.approx(search.theta_min, rel=1e-5)
    assert res.lam == pytest.approx(brute_sup(s), abs=1e-6)


def test_lambda_sup_flat():
    s = CensExpSample(np.array([1.0, 1.0, 0.0001]), 1.0)
    res = lambda_sup(s, ThetaSearch(1.5, 1.7, grid_points=16))
    assert res.lam >= 0
    s = CensExpSample(np.full(3, 1.0), 1.0)
    res = lambda_sup(s, ThetaSearch(1.5, 3.0, grid_points=16))
    assert (res.lam, res.theta_hat, res.p_hat) == (0.0, 1.0, 0.0)


def test_theta_search_validation():
    with pytest.raises(ValueError):
        ThetaSearch(2.0, 1.0)
    with pytest.raises(ValueError):
        ThetaSearch(1.0, 2.0, grid_points=8)
    lo, hi = ThetaSearch.one_sided(10**6).theta_min, ThetaSearch.one_sided(10**6).theta_max
    assert lo == pytest.approx(math.log(1e6))
    assert hi == pytest.approx(1e6 / math.log(1e6) ** 4)
    with pytest.raises(ValueError):
        ThetaSearch.one_sided(100)


def test_lambda_sup_large_sample_agrees_with_grid():
    s = sample_censored(1.0, 1.0, 5000, stream(8))
    res = lambda_sup(s)
    search = ThetaSearch.default(5000, 1.0)
    grid = np.geomspace(search.theta_min, search.theta_max, 400)
    assert res.lam >= max(profile_lambda(s, th)[0] for th in grid) - 1e-9
    assert res.lam == pytest.approx(profile_lambda(s, res.theta_hat)[0], abs=1e-12)


def test_profile_and_score_agree_in_distribution():
    # 2 * profile(theta) and max(0, S(theta))^2 become close as n grows.
    def ks(n, reps=300):
        a, b = [], []
        for i in range(reps):
            s = sample_censored(1.0, 1.0, n, stream(17, n, i))
            a.append(2 * profile_lambda(s, 2.0)[0])
            b.append(max(0.0, score_statistic(s, 2.0)) ** 2)
        a, b = np.sort(a), np.sort(b)
        grid = np.concatenate([a, b])
        fa = np.searchsorted(a, grid, side="right") / reps
        fb = np.searchsorted(b, grid, side="right") / reps
        return np.max(np.abs(fa - fb))

    d = [ks(n) for n in (100, 1000, 10000)]
    assert d[0] > d[1] > d[2]


# Gumbel centring


def test_gumbel_examples():
    assert gumbel_cdf(0.0) == pytest.approx(E1, abs=1e-15)
    assert GUMBEL_MEDIAN == pytest.approx(0.366513, abs=1e-6)
    assert gumbel_cdf(GUMBEL_MEDIAN) == pytest.approx(0.5, abs=1e-15)
    n = 1000
    assert gumbel_center(math.log(math.log(n)) - LOG_4PI, n) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        gumbel_center(1.0, 15)


# Sampling


def test_censoring_fraction():
    n = 100_000
    s = sample_censored(1.0, 1.0, n, stream(5))
    frac = s.censored.mean()
    assert abs(frac - E1) < 3 * math.sqrt(E1 * (1 - E1) / n)


def test_tiny_horizon_censors_everything():
    s = sample_censored(1.0, 1e-9, 100, stream(5))
    assert s.censored.all()


def test_uncensored_mean():
    th, T, n = 2.0, 1.0, 100_000
    x = sample_censored(th, T, n, stream(6)).x
    u = x[x < T]
    num, _ = quad(lambda t: t * th * math.exp(-th * t), 0, T)
    expected = num / (1 - math.exp(-th * T))
    assert abs(u.mean() - expected) < 3 * u.std() / math.sqrt(u.size)


def test_sampling_deterministic():
    a = sample_censored(1.0, 1.0, 50, stream(3, 1))
    b = sample_censored(1.0, 1.0, 50, stream(3, 1))
    np.testing.assert_array_equal(a.x, b.x)


# Monte Carlo driver and IO


def test_monte_carlo_driver_and_workers():
    a = censored_monte_carlo(200, 12, seed=4)
    b = censored_monte_carlo(200, 12, seed=4, workers=2)
    np.testing.assert_array_equal(a.lam, b.lam)
    assert (a.lam >= 0).all()
    np.testing.assert_allclose(a.centered, a.lam - math.log(math.log(200)) + LOG_4PI)
    tab = a.cdf_table()
    assert tab.shape[1] == 3
    assert np.all(np.diff(tab[:, 1]) >= 0)
    assert 0 <= a.ks_gumbel() <= 1


def test_sample_csv_round_trip(tmp_path):
    s = sample_censored(1.0, 1.0, 30, stream(9))
    f = tmp_path / "x.csv"
    write_sample(s, f, theta_true=1.0)
    back = read_sample(f)
    np.testing.assert_array_equal(back.x, s.x)
    assert back.T == 1.0


def test_sample_csv_bad_line(tmp_path):
    f = tmp_path / "x.csv"
    f.write_text("x\n0.5\nabc\n")
    (tmp_path / "x.csv.json").write_text('{"T": 1.0, "n": 2}')
    with pytest.raises(ValueError, match=r"x\.csv:3:"):
        read_sample(f)
