import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats
from scipy.special import expit

from rvrs.errors import BudgetExhaustedError
from rvrs.oracle import QuadratureGrid, quad_summary
from rvrs.proposal import MeanFieldNormal
from rvrs.rng import stream
from rvrs.sampler import (AcceptanceConfig, accept_prob, acceptance_terms, elbo_estimate, estimate_log_Zr,
                          estimate_Zr, evaluate_elbo, rejection_sample)
from rvrs.target import AnalyticGaussianTarget

SIG_M1 = float(expit(-1.0))


@pytest.fixture
def constant_a():
    """Target with evidence e^-1 and q equal to its posterior: ``a = sigmoid(-1)`` everywhere."""
    t = AnalyticGaussianTarget.isotropic(-1.0, 0.0, 1.0, 1)
    return t, t.posterior_meanfield()


# -- configuration ----------------------------------------------------------------------

def test_config_validation():
    assert AcceptanceConfig(1.0, 0.2).zeta == pytest.approx(0.25)
    assert AcceptanceConfig(math.inf).T == math.inf
    for bad in (math.nan, -math.inf):
        with pytest.raises(ValueError):
            AcceptanceConfig(bad)
    for eps in (-0.1, 1.0):
        with pytest.raises(ValueError):
            AcceptanceConfig(0.0, eps)


# -- acceptance probability ------------------------------------------------------------

def test_accept_prob_half():
    _, a_raw, a, _ = acceptance_terms(np.array([-1.3]), np.array([-1.3]), AcceptanceConfig(0.0))
    assert a_raw[0] == 0.5 and a[0] == 0.5


def test_accept_prob_large_T(constant_a):
    t, q = constant_a
    t0 = AnalyticGaussianTarget.isotropic(0.0, 0.0, 1.0, 1)
    _, a = accept_prob(t0, None, q, AcceptanceConfig(40.0), np.linspace(-3, 3, 7)[:, None])
    np.testing.assert_allclose(a, 1.0, rtol=0, atol=1e-15)


def test_accept_prob_floor():
    _, a_raw, a, log_a = acceptance_terms(np.array([-5000.0]), np.array([0.0]), AcceptanceConfig(0.0, 1e-4))
    assert a_raw[0] == 0.0
    assert a[0] == pytest.approx(1e-4, rel=1e-12)
    assert log_a[0] == pytest.approx(math.log(1e-4), rel=1e-12)


def test_log_a_stable_for_very_negative_u():
    _, _, a, log_a = acceptance_terms(np.array([-1000.0]), np.array([0.0]), AcceptanceConfig(0.0))
    assert a[0] == 0.0 and log_a[0] == pytest.approx(-1000.0)


@given(st.floats(-1e3, 1e3), st.floats(-50, 50), st.floats(0, 0.5))
def test_acceptance_in_range_and_consistent(u, T, eps):
    cfg = AcceptanceConfig(T, eps)
    uu, a_raw, a, log_a = acceptance_terms(np.array([u]), np.array([0.0]), cfg)
    assert eps <= a[0] <= 1.0
    assert a[0] == pytest.approx(eps + (1 - eps) * a_raw[0], rel=1e-12, abs=1e-300)
    if a[0] > 1e-300:
        assert log_a[0] == pytest.approx(math.log(a[0]), rel=1e-9, abs=1e-12)


# -- the sampler ----------------------------------------------------------------------------

def test_all_accepted_when_a_is_one():
    t = AnalyticGaussianTarget.isotropic(0.0, 0.0, 1.0, 1)
    q = MeanFieldNormal(np.array([0.5]), np.array([0.2]))
    b = rejection_sample(t, None, q, AcceptanceConfig(math.inf), stream(0), 50)
    np.testing.assert_array_equal(b.proposals_used, 1)
    assert b.total_proposals == 50


def test_batch_cached_quantities_consistent(mismatch_problem):
    t, q = mismatch_problem
    cfg = AcceptanceConfig(-0.5, 1e-3)
    b = rejection_sample(t, None, q, cfg, stream(1), 40, n_batches=3)
    assert b.z.shape == (3, 40, 1) and b.A.shape == (3, 40)
    np.testing.assert_allclose(b.log_p, t.log_joint(b.z))
    np.testing.assert_allclose(b.log_q, q.log_density(b.z))
    a_raw, a = accept_prob(t, None, q, cfg, b.z)
    np.testing.assert_allclose(b.a, a)
    np.testing.assert_allclose(b.a_raw, a_raw)
    np.testing.assert_allclose(b.A, b.log_p - b.log_q - np.log(b.a), rtol=1e-12)
    np.testing.assert_array_equal(q.transform(b.eps), b.z)
    assert np.all(b.proposals_used >= 1)
    assert b.proposals_used.sum() <= b.total_proposals


def test_budget_exhausted():
    t = AnalyticGaussianTarget.isotropic(0.0, 0.0, 1.0, 1)
    q = MeanFieldNormal.standard(1)
    with pytest.raises(BudgetExhaustedError) as err:
        rejection_sample(t, None, q, AcceptanceConfig(-40.0), stream(0), 2, max_proposals=1000)
    assert err.value.proposals_drawn >= 1000
    with pytest.raises(ValueError):
        rejection_sample(t, None, q, AcceptanceConfig(0.0), stream(0), 5, max_proposals=3)


def test_sampler_is_deterministic(mismatch_problem):
    t, q = mismatch_problem
    b1 = rejection_sample(t, None, q, AcceptanceConfig(0.0), stream(9, 1), 20)
    b2 = rejection_sample(t, None, q, AcceptanceConfig(0.0), stream(9, 1), 20)
    np.testing.assert_array_equal(b1.z, b2.z)
    np.testing.assert_array_equal(b1.proposals_used, b2.proposals_used)


def test_constant_acceptance_draw_count(constant_a):
    t, q = constant_a
    b = rejection_sample(t, None, q, AcceptanceConfig(0.0), stream(2), 10_000)
    np.testing.assert_allclose(b.a, SIG_M1, rtol=1e-12)
    assert b.proposals_used.mean() == pytest.approx(1 / SIG_M1, rel=0.02)
    assert 1 / SIG_M1 == pytest.approx(3.7183, abs=1e-4)


def test_draw_counts_are_geometric(mismatch_problem):
    t, q = mismatch_problem
    cfg = AcceptanceConfig(0.0)
    Zr = quad_summary(t, None, q, cfg).Zr
    n = rejection_sample(t, None, q, cfg, stream(3), 100_000).proposals_used
    assert n.mean() == pytest.approx(1 / Zr, rel=0.05)
    assert n.var() == pytest.approx((1 - Zr) / Zr**2, rel=0.05)


def _chi2_against_quadrature(t, q, cfg, z, n_bins=40):
    grid = QuadratureGrid.trapezoid(-8, 9, 40001)
    x = grid.nodes[:, 0]
    _, a = accept_prob(t, None, q, cfg, grid.nodes)
    dens = np.exp(q.log_density(grid.nodes)) * a
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(x))])
    cdf /= cdf[-1]
    edges = np.interp(np.linspace(0, 1, n_bins + 1), cdf, x)
    edges[0], edges[-1] = -np.inf, np.inf
    observed = np.histogram(z, edges)[0]
    expected = np.full(n_bins, len(z) / n_bins)
    return stats.chisquare(observed, expected).pvalue


def test_accepted_histogram_matches_r(mismatch_problem):
    t, q = mismatch_problem
    cfg = AcceptanceConfig(0.0, 1e-4)
    z = rejection_sample(t, None, q, cfg, stream(4), 100_000).z[:, 0]
    assert _chi2_against_quadrature(t, q, cfg, z) > 0.01


def test_huge_T_returns_q_samples(mismatch_problem):
    t, q = mismatch_problem
    z = rejection_sample(t, None, q, AcceptanceConfig(math.inf), stream(5), 20_000).z[:, 0]
    ref = q.sample(stream(6), 20_000)[:, 0]
    assert stats.ks_2samp(z, ref).pvalue > 0.01


# -- acceptance-rate and ELBO estimates ----------------------------------------------------

def test_estimate_Zr_constant_case(constant_a):
    t, q = constant_a
    m, se = estimate_Zr(t, None, q, AcceptanceConfig(0.0), stream(7), 1000)
    assert m == pytest.approx(SIG_M1, abs=1e-12)
    assert se < 1e-12
    assert estimate_log_Zr(t, None, q, AcceptanceConfig(0.0), stream(7), 1000) == pytest.approx(-math.log1p(math.e),
                                                                                               abs=1e-12)


def test_estimate_Zr_floor():
    t = AnalyticGaussianTarget.isotropic(-500.0, 0.0, 1.0, 1)
    q = MeanFieldNormal.standard(1)
    cfg = AcceptanceConfig(0.0, 0.05)
    m, _ = estimate_Zr(t, None, q, cfg, stream(8), 10_000)
    assert m >= 0.05
    assert estimate_log_Zr(t, None, q, cfg, stream(8), 10_000) >= math.log(0.05)


def test_estimate_Zr_matches_quadrature(mismatch_problem):
    t, q = mismatch_problem
    cfg = AcceptanceConfig(0.0)
    exact = quad_summary(t, None, q, cfg)
    m, se = estimate_Zr(t, None, q, cfg, stream(9), 100_000)
    assert abs(m - exact.Zr) < 3 * se
    # delta method: sd of log(mean) is se / Z_r, about 1.7e-3 here at M = 1e5
    assert abs(estimate_log_Zr(t, None, q, cfg, stream(9), 100_000) - exact.log_Zr) < 3 * se / m
    assert estimate_log_Zr(t, None, q, cfg, stream(12), 1_000_000) == pytest.approx(exact.log_Zr, abs=1e-3)


def test_estimate_Zr_requires_two_draws(mismatch_problem):
    t, q = mismatch_problem
    with pytest.raises(ValueError):
        estimate_Zr(t, None, q, AcceptanceConfig(0.0), stream(0), 1)


def test_elbo_exact_match_limit():
    t = AnalyticGaussianTarget.isotropic(0.0, 0.3, 0.7, 1)
    q = t.posterior_meanfield()
    assert evaluate_elbo(t, None, q, AcceptanceConfig(40.0), stream(10), S=1000, M=1000) == pytest.approx(0, abs=1e-6)


def test_elbo_matches_quadrature(mismatch_problem):
    t, q = mismatch_problem
    cfg = AcceptanceConfig(0.0)
    exact = quad_summary(t, None, q, cfg)
    b = rejection_sample(t, None, q, cfg, stream(11), 10_000)
    se = b.A.std(ddof=1) / math.sqrt(b.A.size)
    assert abs(elbo_estimate(b, exact.log_Zr) - exact.elbo) < 3 * se


def test_elbo_estimate_rejects_empty(mismatch_problem):
    t, q = mismatch_problem
    b = rejection_sample(t, None, q, AcceptanceConfig(0.0), stream(0), 2)
    b.A = np.zeros(0)
    with pytest.raises(ValueError):
        elbo_estimate(b, 0.0)


def test_quadrature_elbo_monotone_in_T(mismatch_problem):
    t, q = mismatch_problem
    Ts = np.linspace(-6, 6, 25)
    elbos = [quad_summary(t, None, q, AcceptanceConfig(T)).elbo for T in Ts]
    assert np.all(np.diff(elbos) <= 1e-9)
