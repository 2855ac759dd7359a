import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, stats
from scipy.special import expit

from synth import central_diff, random_instance
from vaxsignal.zinb import (
    FitConfig,
    GroupDesign,
    ZinbParams,
    fit_group,
    group_negloglik,
    group_negloglik_grad,
    zinb_log_pmf,
)


def design(y, M, vi, I=None):
    vi = np.asarray(vi)
    return GroupDesign(np.asarray(y, float), np.asarray(M, float), vi, I or int(vi.max()) + 1)


# --- kernel ---------------------------------------------------------------


def test_log_pmf_zero_closed_form():
    assert zinb_log_pmf(0, ZinbParams(0.5, 1.0, 1.0), 1.0) == pytest.approx(math.log(0.75), abs=1e-15)


def test_log_pmf_geometric_case():
    assert zinb_log_pmf(1, ZinbParams(0.5, 1.0, 1.0), 1.0) == pytest.approx(math.log(0.125), abs=1e-15)


def test_log_pmf_matches_scipy_nbinom():
    r, m, p = 2.5, 3.7, 0.3
    y = np.arange(1, 30)
    ref = np.log1p(-p) + stats.nbinom.logpmf(y, r, r / (r + m))
    np.testing.assert_allclose(zinb_log_pmf(y, ZinbParams(p, 1.0, r), m), ref, rtol=1e-12)


@pytest.mark.parametrize("p", [1e-300, 0.2, 0.7])
def test_large_r_is_zero_inflated_poisson(p):
    # counts within 6 sd of the mean; further out the true NB/Poisson gap
    # ((y - m)^2 - y) / (2 r) itself exceeds 1e-6
    m = 3.3
    y = np.arange(0, int(m + 6 * math.sqrt(m)) + 1)
    zip_ref = np.where(
        y == 0,
        np.log(p + (1 - p) * math.exp(-m)),
        np.log1p(-p) + stats.poisson.logpmf(y, m),
    )
    got = zinb_log_pmf(y, ZinbParams(p, 1.1, 1e8), m / 1.1)
    assert np.max(np.abs(got - zip_ref)) <= 1e-6


def test_large_r_gap_matches_first_order_correction():
    r, m = 1e8, 3.3
    y = np.arange(1, 60)
    gap = zinb_log_pmf(y, ZinbParams(1e-300, m, r), 1.0) - stats.poisson.logpmf(y, m)
    np.testing.assert_allclose(gap, ((y - m) ** 2 - y) / (2 * r), atol=2e-9)


def test_extreme_scales_finite():
    assert np.isfinite(zinb_log_pmf(1e6, ZinbParams(0.1, 1.0, 1e8), 1e6))
    assert np.isfinite(zinb_log_pmf(3, ZinbParams(0.1, 1.0, 1e8), 1e6))


def test_non_finite_input_rejected():
    with pytest.raises(ValueError):
        zinb_log_pmf(np.nan, ZinbParams(0.5, 1.0, 1.0), 1.0)
    with pytest.raises(ValueError):
        zinb_log_pmf(1.0, ZinbParams(0.5, 1.0, 1.0), np.inf)


def test_fractional_count_is_continuous():
    P = ZinbParams(0.3, 1.2, 2.0)
    assert zinb_log_pmf(2.5, P, 2.0) == pytest.approx(
        0.5 * (zinb_log_pmf(2.5 - 1e-7, P, 2.0) + zinb_log_pmf(2.5 + 1e-7, P, 2.0)), abs=1e-9
    )


@pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
@pytest.mark.parametrize("r", [0.5, 1.0, 5.0])
@pytest.mark.parametrize("m", [0.1, 1.0, 10.0])
def test_pmf_sums_to_one(p, r, m):
    Y = int(math.ceil(m + 50 * math.sqrt(m + m * m / r)))
    y = np.arange(0, Y + 1)
    total = math.fsum(np.exp(zinb_log_pmf(y, ZinbParams(p, m, r), 1.0)))
    assert abs(total - 1.0) <= 1e-9


# --- likelihood -------------------------------------------------------------


def test_negloglik_single_entry():
    d = design([0.0], [1.0], [0])
    assert group_negloglik(np.array([0.0, 0.0, 0.0]), d) == pytest.approx(0.2877, abs=5e-5)
    assert group_negloglik(np.array([0.0, 0.0, 0.0]), d) == pytest.approx(-math.log(0.75), abs=1e-15)


def test_negloglik_duplicated_entries_double():
    y, M, vi = [0, 3, 1.5, 7], [1.0, 2.0, 0.7, 4.0], [0, 0, 1, 1]
    theta = np.array([0.2, -0.4, 0.3, 0.1, 0.5])
    one = group_negloglik(theta, design(y, M, vi))
    two = group_negloglik(theta, design(y * 2, M * 2, vi * 2))
    assert two == 2 * one


def test_negloglik_order_bit_identical():
    rng = np.random.default_rng(4)
    y = rng.poisson(3, 40).astype(float)
    M = rng.uniform(0.5, 10, 40)
    vi = rng.integers(0, 3, 40)
    vi[:3] = [0, 1, 2]
    theta = rng.normal(size=7)
    base = group_negloglik(theta, design(y, M, vi))
    perm = rng.permutation(40)
    assert group_negloglik(theta, design(y[perm], M[perm], vi[perm])) == base


def test_negloglik_vaccine_relabel_invariance():
    rng = np.random.default_rng(5)
    y = rng.poisson(2, 30).astype(float)
    M = rng.uniform(0.5, 10, 30)
    vi = np.repeat([0, 1, 2], 10)
    theta = rng.normal(size=7)
    relabel = np.array([2, 0, 1])
    theta2 = theta.copy()
    theta2[relabel] = theta[:3]
    theta2[3 + relabel] = theta[3:6]
    assert group_negloglik(theta2, design(y, M, relabel[vi])) == group_negloglik(theta, design(y, M, vi))


def test_negloglik_non_finite_is_inf():
    d = design([1.0], [1.0], [0])
    assert group_negloglik(np.array([0.0, 800.0, 0.0]), d) == math.inf
    assert group_negloglik(np.array([np.nan, 0.0, 0.0]), d) == math.inf


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(20)
    worst = 0.0
    for _ in range(100):
        theta, d = random_instance(rng)
        g = group_negloglik_grad(theta, d)
        fd = central_diff(lambda t: group_negloglik(t, d), theta)
        scale = np.maximum(np.abs(fd), 1e-2 * np.max(np.abs(fd)))
        worst = max(worst, float(np.max(np.abs(g - fd) / scale)))
    assert worst <= 1e-5


def test_gradient_large_r_branch():
    rng = np.random.default_rng(21)
    theta, d = random_instance(rng)
    theta[-1] = math.log(500.0)
    g = group_negloglik_grad(theta, d)
    fd = central_diff(lambda t: group_negloglik(t, d), theta)
    np.testing.assert_allclose(g[:-1], fd[:-1], rtol=1e-5, atol=1e-7)
    assert abs(g[-1] - fd[-1]) <= 1e-5 * max(abs(fd[-1]), 1e-3)


def test_gradient_sign_for_zero_counts():
    d = design([0, 0, 0, 0], [1.0, 2.0, 3.0, 4.0], [0, 0, 0, 0])
    theta = np.array([0.0, 0.0, 0.0])
    g = group_negloglik_grad(theta, d)
    fd = central_diff(lambda t: group_negloglik(t, d), theta)
    assert g[0] < 0 and fd[0] < 0


# --- fitting ----------------------------------------------------------------


def simulate(rng, p, mu, r, M):
    lam = np.where(rng.random(M.shape) < p, 0.0, rng.gamma(r, mu / r, size=M.shape))
    return rng.poisson(M * lam).astype(float)


def test_fit_gradient_small_at_optimum():
    rng = np.random.default_rng(8)
    M = rng.uniform(5, 50, 300)
    vi = np.repeat([0, 1, 2], 100)
    y = simulate(rng, 0.3, 2.0, 1.5, M)
    fit = fit_group(design(y, M, vi))
    assert fit.converged
    assert not any(fit.boundary_flags)
    assert np.max(np.abs(group_negloglik_grad(fit.theta, design(y, M, vi)))) < 1e-6
    assert fit.loglik >= fit.initial_loglik


def test_parameter_recovery():
    rng = np.random.default_rng(9)
    est = []
    for _ in range(200):
        M = rng.uniform(5, 50, 200)
        y = simulate(rng, 0.3, 2.0, 1.5, M)
        fit = fit_group(design(y, M, np.zeros(200, int)))
        assert fit.converged
        est.append([float(fit.params.p[0]), float(fit.params.mu[0]), fit.params.r])
    est = np.array(est)
    se = est.std(axis=0, ddof=1) / np.sqrt(len(est))
    assert np.all(np.abs(est.mean(axis=0) - [0.3, 2.0, 1.5]) <= 3 * se)


def _zip_max_loglik(y, M):
    """Zero-inflated Poisson maximum by direct optimization over (logit p, log mu)."""
    def nll(t):
        p, mu = expit(t[0]), math.exp(t[1])
        m = M * mu
        ll = np.where(y == 0, np.log(p + (1 - p) * np.exp(-m)), np.log1p(-p) + stats.poisson.logpmf(y, m))
        return -ll.sum()

    best = min((optimize.minimize(nll, x0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12,
                                                                           "maxiter": 5000})
                for x0 in ([0.0, 0.0], [-1.0, 1.0])), key=lambda r: r.fun)
    return -best.fun


def test_zip_data_handled():
    rng = np.random.default_rng(10)
    M = rng.uniform(5, 50, 200)
    lam = np.where(rng.random(200) < 0.3, 0.0, 2.0)
    y = rng.poisson(M * lam).astype(float)
    fit = fit_group(design(y, M, np.zeros(200, int)))
    assert fit.params.r >= 1e3 or fit.loglik >= _zip_max_loglik(y, M) - 0.5


def test_one_entry_per_vaccine_never_crashes():
    fit = fit_group(design([3.0, 0.0], [2.0, 1.0], [0, 1]))
    assert (not fit.converged) or any(fit.boundary_flags)
    assert all("underdetermined" in f for f in fit.boundary_flags)


def test_all_zero_vaccine_clamped_and_flagged():
    rng = np.random.default_rng(11)
    M = rng.uniform(1, 10, 40)
    y = np.r_[np.zeros(20), rng.poisson(2 * M[20:]).astype(float)]
    fit = fit_group(design(y, M, np.repeat([0, 1], 20)))
    assert "all_zero" in fit.boundary_flags[0]
    assert fit.params.p[0] == pytest.approx(expit(10.0))
    assert fit.params.mu[0] == pytest.approx(0.01)
    assert fit.boundary_flags[1] == [] or fit.boundary_flags[1] == ["p_at_bound"]


def test_fit_respects_config():
    rng = np.random.default_rng(12)
    M = rng.uniform(5, 50, 100)
    y = simulate(rng, 0.3, 2.0, 1.5, M)
    fit = fit_group(design(y, M, np.zeros(100, int)), FitConfig(max_iter=2))
    assert fit.iterations <= 2 and not fit.converged


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(grad_tol=0)
    with pytest.raises(ValueError):
        FitConfig(log_r_bounds=(1.0, 1.0))


def test_design_validation():
    with pytest.raises(ValueError):
        design([1.0], [0.0], [0])
    with pytest.raises(ValueError):
        GroupDesign(np.array([1.0]), np.array([1.0]), np.array([0]), 2)


def test_fit_serializes():
    import json

    fit = fit_group(design([0, 2, 5, 1], [1.0, 2.0, 3.0, 1.5], [0, 0, 1, 1]))
    d = json.loads(json.dumps(fit.to_dict()))
    assert set(d) >= {"p", "mu", "r", "loglik", "converged", "iterations", "gradient_norm", "boundary_flags"}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fit_improves_on_start(seed):
    rng = np.random.default_rng(seed)
    I = int(rng.integers(1, 4))
    K = int(rng.integers(2, 15))
    M = rng.uniform(0.5, 20, I * K)
    y = simulate(rng, rng.uniform(0, 0.8), rng.uniform(0.3, 4), rng.uniform(0.3, 10), M)
    fit = fit_group(design(y, M, np.repeat(np.arange(I), K), I))
    assert fit.loglik >= fit.initial_loglik
    if fit.converged:
        assert fit.gradient_norm <= 1e-8
