import numpy as np
import pytest
from scipy import stats

from rvrs.errors import DataFormatError, DataIndexError, DimensionError, NoThetaError
from rvrs.oracle import QuadratureGrid, finite_diff, quad_log_evidence
from rvrs.target import (AnalyticGaussianTarget, FunnelTarget, GaussianMixtureTarget, HierStudentTModel,
                         LogisticRegressionTarget, load_dataset, make_heavy_tailed_regression,
                         make_synthetic_logistic)

LOG_2PI = np.log(2 * np.pi)


@pytest.fixture
def logistic():
    X, y = make_synthetic_logistic(40, 4, np.random.default_rng(0))
    return LogisticRegressionTarget(X, y)


@pytest.fixture
def hier():
    X, y = make_heavy_tailed_regression(6, 2, np.random.default_rng(1))
    return HierStudentTModel(X, y, nu=3.0, sigma=0.8, prior_scale=1.5)


# -- log joint ---------------------------------------------------------------------

def test_funnel_at_origin():
    assert FunnelTarget().log_joint(np.zeros(2)) == pytest.approx(-1.8378770664093453, abs=1e-12)


def test_logistic_at_zero(logistic):
    expected = logistic.n_data * np.log(0.5) - 0.5 * 4 * LOG_2PI
    assert logistic.log_joint(np.zeros(4)) == pytest.approx(expected, abs=1e-10)


def test_analytic_gaussian_value():
    t = AnalyticGaussianTarget.isotropic(-1.0, 0.0, 1.0, 1)
    assert t.log_joint(np.zeros(1)) == pytest.approx(-1.918938533204673, abs=1e-12)


def test_dimension_mismatch(logistic):
    with pytest.raises(DimensionError):
        FunnelTarget().log_joint(np.zeros(3))
    with pytest.raises(DimensionError):
        logistic.grad_z_log_joint(np.zeros(2))


def test_batched_evaluation(logistic):
    z = np.random.default_rng(2).normal(size=(3, 5, 4))
    vals = logistic.log_joint(z)
    assert vals.shape == (3, 5)
    assert vals[1, 2] == pytest.approx(logistic.log_joint(z[1, 2]))


def test_logistic_formula_against_direct_sum(logistic):
    z = np.random.default_rng(3).normal(size=4)
    logits = logistic.features @ z
    y = logistic.labels
    lik = np.sum(y * np.log(1 / (1 + np.exp(-logits))) + (1 - y) * np.log(1 / (1 + np.exp(logits))))
    prior = np.sum(stats.norm.logpdf(z))
    assert logistic.log_joint(z) == pytest.approx(prior + lik, rel=1e-12)


def test_logistic_standardizes_columns():
    X, y = make_synthetic_logistic(50, 3, np.random.default_rng(4), log10_feature_scale=(-2, 0))
    t = LogisticRegressionTarget(X, y)
    np.testing.assert_allclose(t.features.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(t.features.std(axis=0), 1, atol=1e-12)
    raw = LogisticRegressionTarget(X, y, standardize=False)
    np.testing.assert_array_equal(raw.features, X)


# -- z-gradients ---------------------------------------------------------------------

def test_analytic_gaussian_gradient():
    t = AnalyticGaussianTarget.isotropic(0.0, 0.0, 1.0, 2)
    np.testing.assert_allclose(t.grad_z_log_joint(np.array([1.0, -1.0])), [-1.0, 1.0])


def _check_fd(target, points, rtol):
    for z in points:
        fd = finite_diff(lambda x: float(target.log_joint(x)), z)
        np.testing.assert_allclose(target.grad_z_log_joint(z), fd, rtol=rtol, atol=1e-6)


def test_funnel_gradient():
    f = FunnelTarget()
    assert np.all(np.isfinite(f.grad_z_log_joint(np.zeros(2))))
    _check_fd(f, [np.zeros(2)] + list(np.random.default_rng(5).normal(size=(19, 2))), 1e-6)


def test_logistic_gradient(logistic):
    _check_fd(logistic, np.random.default_rng(6).normal(size=(20, 4)), 1e-5)
    lp, g = logistic.log_joint_and_grad(np.ones(4))
    assert lp == logistic.log_joint(np.ones(4))
    np.testing.assert_array_equal(g, logistic.grad_z_log_joint(np.ones(4)))


def test_mixture_gradient_and_normalization():
    t = GaussianMixtureTarget([0.7, 0.3], [[-1.0], [1.5]], [0.6, 1.0])
    _check_fd(t, np.random.default_rng(7).normal(size=(20, 1)) * 2, 1e-6)
    grid = QuadratureGrid.trapezoid(-15, 15, 4001)
    assert quad_log_evidence(t, None, grid) == pytest.approx(0.0, abs=1e-10)


def test_fullrank_gaussian_gradient():
    t = AnalyticGaussianTarget(0.3, [1.0, -1.0], [[1.0, 0.0], [0.6, 0.5]])
    _check_fd(t, np.random.default_rng(8).normal(size=(20, 2)), 1e-6)


def test_hier_joint_gradient(hier):
    _check_fd(hier, 0.5 * np.random.default_rng(9).normal(size=(20, hier.latent_dim)), 1e-5)


# -- theta gradients -----------------------------------------------------------------

def test_analytic_gaussian_theta_gradient_is_one():
    t = AnalyticGaussianTarget.isotropic(-0.4, 0.0, 1.0, 2)
    z = np.random.default_rng(10).normal(size=(7, 2))
    np.testing.assert_array_equal(t.grad_theta_log_joint(z), np.ones((7, 1)))


def test_hier_theta_gradient(hier):
    rng = np.random.default_rng(11)
    for z in 0.5 * rng.normal(size=(20, hier.latent_dim)):
        fd = finite_diff(lambda th: float(hier.log_joint(z, th)), hier.theta)
        np.testing.assert_allclose(hier.grad_theta_log_joint(z), fd, rtol=1e-5, atol=1e-6)


def test_no_theta_raises(logistic):
    with pytest.raises(NoThetaError):
        FunnelTarget().grad_theta_log_joint(np.zeros(2))
    with pytest.raises(NoThetaError):
        logistic.grad_theta_log_joint(np.zeros(4))


# -- hierarchical local factors --------------------------------------------------------

def _local_marginal(model, z_G, n, nu=None):
    grid = QuadratureGrid.trapezoid(-30, 12, 20001)
    theta = None if nu is None else np.array([np.log(nu), model.theta[1]])
    vals = np.array([model.local_log_joint(z_G, n, np.array([zn]), theta)[0] for zn in grid.nodes[:, 0]])
    return np.log(np.sum(grid.weights * np.exp(vals)))


def test_local_factor_integrates_to_student_t(hier):
    z_G = np.array([0.3, -0.2, 0.1])
    nu, sigma = np.exp(hier.theta)
    mean = hier.features @ z_G[:2] + z_G[2]
    for n in range(hier.n_data):
        expected = stats.t.logpdf(hier.responses[n], df=nu, loc=mean[n], scale=sigma)
        assert _local_marginal(hier, z_G, n) == pytest.approx(expected, abs=1e-6)
        assert hier.log_marginal_local(z_G, [n])[0] == pytest.approx(expected, abs=1e-12)


def test_local_factor_jacobian(hier):
    z_G = np.array([0.1, 0.4, -0.3])
    nu, sigma = np.exp(hier.theta)
    mean = hier.features @ z_G[:2] + z_G[2]
    for n, zn in [(0, -0.7), (3, 1.2)]:
        lam = np.exp(zn)
        direct = (stats.gamma.logpdf(lam, a=nu / 2, scale=2 / nu)
                  + stats.norm.logpdf(hier.responses[n], mean[n], sigma / np.sqrt(lam)))
        assert hier.local_log_joint(z_G, n, zn) - direct == pytest.approx(zn, abs=1e-10)


def test_large_nu_limit_is_normal(hier):
    z_G = np.array([0.2, 0.2, 0.0])
    sigma = np.exp(hier.theta[1])
    mean = hier.features @ z_G[:2] + z_G[2]
    for n in range(3):
        expected = stats.norm.logpdf(hier.responses[n], mean[n], sigma)
        assert _local_marginal(hier, z_G, n, nu=1e6) == pytest.approx(expected, abs=1e-3)


def test_local_index_errors(hier):
    with pytest.raises(DataIndexError):
        hier.local_log_joint(np.zeros(3), hier.n_data, 0.0)
    with pytest.raises(DataIndexError):
        hier.local_log_joint_batch(np.zeros(3), np.zeros((1, 1)), idx=[-1])


def test_marginal_target_gradient(hier):
    m = hier.marginal_target()
    _check_fd(m, np.random.default_rng(12).normal(size=(10, 3)), 1e-6)


def test_local_batch_derivatives(hier):
    rng = np.random.default_rng(13)
    z_G = rng.normal(size=3)
    idx = np.array([1, 4])
    z_loc = rng.normal(size=(2, 3))
    f = lambda zg: float(np.sum(hier.local_log_joint_batch(zg, z_loc, idx)))
    np.testing.assert_allclose(np.sum(hier.grad_local_global(z_G, z_loc, idx), axis=(0, 1)),
                               finite_diff(f, z_G), rtol=1e-6, atol=1e-7)
    g = lambda zl: float(np.sum(hier.local_log_joint_batch(z_G, zl.reshape(2, 3), idx)))
    np.testing.assert_allclose(hier.grad_local_z(z_G, z_loc, idx).ravel(), finite_diff(g, z_loc.ravel()),
                               rtol=1e-6, atol=1e-7)


def test_funnel_is_normalized():
    g = QuadratureGrid.trapezoid(-25, 25, 1201)
    grid = QuadratureGrid.product(g, g)
    assert quad_log_evidence(FunnelTarget(), None, grid) == pytest.approx(0.0, abs=1e-3)


# -- dataset loading ---------------------------------------------------------------------

def test_load_dataset_comma_and_whitespace(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1.0,2.0,1\n-1.0,0.5,0\n")
    X, y = load_dataset(p)
    np.testing.assert_array_equal(X, [[1.0, 2.0], [-1.0, 0.5]])
    np.testing.assert_array_equal(y, [1, 0])
    p.write_text("1.0 2.0 3.5\n0 0 -1\n")
    X, y = load_dataset(p, task="regression")
    assert X.shape == (2, 2) and y[0] == 3.5


@pytest.mark.parametrize("text", ["a,b,c\n1,2,0\n", "1,2,0\n1,2\n", "1,2,0.5\n", "1,nan,1\n", "\n"])
def test_load_dataset_rejects_malformed(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataFormatError):
        load_dataset(p)
