"""Target densities: unnormalized log joints with analytic gradients.

Every target evaluates on arrays whose last axis is the latent dimension and
returns one value per leading index, so a whole batch of samples is scored in
one call.  ``theta`` defaults to the value stored on the target.
"""

import numpy as np
from scipy.special import digamma, expit, gammaln, log_expit

from ._validation import as_float_array, check_latent
from .errors import DataFormatError, DataIndexError, NoThetaError
from .proposal import LOG_2PI, FullRankNormal, MeanFieldNormal

_SQRT_HALF = float(np.sqrt(0.5))


class TargetModel:
    """Interface shared by all targets.

    Subclasses set ``latent_dim``, ``theta_dim`` and ``theta`` and implement
    ``log_joint`` and ``grad_z_log_joint``; models with parameters also
    implement ``_grad_theta``.
    """

    latent_dim = 0
    theta_dim = 0
    theta = None

    def _resolve_theta(self, theta):
        if theta is None:
            theta = self.theta
        return None if theta is None else np.asarray(theta, dtype=np.float64)

    def log_joint(self, z, theta=None):
        raise NotImplementedError

    def grad_z_log_joint(self, z, theta=None):
        raise NotImplementedError

    def grad_theta_log_joint(self, z, theta=None):
        if self.theta_dim == 0:
            raise NoThetaError(f"{type(self).__name__} has no model parameters")
        z = check_latent(z, self.latent_dim)
        return self._grad_theta(z, self._resolve_theta(theta))

    def _grad_theta(self, z, theta):
        raise NotImplementedError

    def log_joint_and_grad(self, z, theta=None):
        return self.log_joint(z, theta), self.grad_z_log_joint(z, theta)


class AnalyticGaussianTarget(TargetModel):
    """``log p(x, z) = log_Zp + log N(z | mean, chol chol^T)``.

    The posterior is the Normal itself and the evidence is ``log_Zp``, which
    doubles as the single model parameter.
    """

    theta_dim = 1

    def __init__(self, log_Zp=0.0, mean=None, chol=None, dim=None):
        if mean is None:
            mean = np.zeros(1 if dim is None else dim)
        mean = as_float_array(mean, "mean").reshape(-1)
        d = mean.shape[0]
        chol = np.eye(d) if chol is None else np.tril(as_float_array(chol, "chol").reshape(d, d))
        self.posterior = FullRankNormal.from_cholesky(mean, chol)
        self.latent_dim = d
        self.theta = np.array([float(log_Zp)])

    @classmethod
    def isotropic(cls, log_Zp=0.0, mean=0.0, scale=1.0, dim=1):
        mean = np.broadcast_to(np.asarray(mean, dtype=float), (dim,)).copy()
        return cls(log_Zp, mean, np.eye(dim) * scale)

    @property
    def log_Zp(self):
        return float(self.theta[0])

    @property
    def mean(self):
        return self.posterior.mu

    @property
    def chol(self):
        return self.posterior.chol

    def posterior_meanfield(self):
        """Mean-field Normal equal to the posterior when ``chol`` is diagonal."""
        return MeanFieldNormal(self.mean.copy(), np.log(np.sqrt(np.diag(self.posterior.covariance))))

    def log_joint(self, z, theta=None):
        z = check_latent(z, self.latent_dim)
        return self._resolve_theta(theta)[0] + self.posterior.log_density(z)

    def grad_z_log_joint(self, z, theta=None):
        z = check_latent(z, self.latent_dim)
        return self.posterior.grad_z_log_density(z)

    def _grad_theta(self, z, theta):
        return np.ones(z.shape[:-1] + (1,))


class FunnelTarget(TargetModel):
    """Normalized 2-D funnel, rotated by 45 degrees.

    With ``v = (x + y)/sqrt 2`` and ``w = (x - y)/sqrt 2``:
    ``v ~ N(0, 1)`` and ``w | v ~ N(0, exp(v))``.
    """

    latent_dim = 2

    def _rotate(self, z):
        z = check_latent(z, 2)
        x, y = z[..., 0], z[..., 1]
        return (x + y) * _SQRT_HALF, (x - y) * _SQRT_HALF

    def log_joint(self, z, theta=None):
        v, w = self._rotate(z)
        return -LOG_2PI - 0.5 * v**2 - 0.5 * v - 0.5 * w**2 * np.exp(-v)

    def grad_z_log_joint(self, z, theta=None):
        v, w = self._rotate(z)
        ev = np.exp(-v)
        dv = -v - 0.5 + 0.5 * w**2 * ev
        dw = -w * ev
        return np.stack([(dv + dw) * _SQRT_HALF, (dv - dw) * _SQRT_HALF], axis=-1)


def _lse(x):
    # small-array log-sum-exp over the last axis
    m = np.max(x, axis=-1, keepdims=True)
    return m[..., 0] + np.log(np.sum(np.exp(x - m), axis=-1))


class GaussianMixtureTarget(TargetModel):
    """Normalized mixture of isotropic Normals; ``log Z_p = 0``.

    Parameters
    ----------
    weights : array_like, shape (K,)
        Mixture weights, normalized internally.
    means : array_like, shape (K, D)
    scales : array_like, shape (K,)
    """

    def __init__(self, weights, means, scales):
        w = as_float_array(weights, "weights").reshape(-1)
        if np.any(w <= 0):
            raise ValueError("mixture weights must be positive")
        self.log_weights = np.log(w / w.sum())
        self.means = as_float_array(means, "means").reshape(w.size, -1)
        self.scales = as_float_array(scales, "scales").reshape(-1)
        if self.means.shape[0] != w.size or self.scales.size != w.size:
            raise ValueError("weights, means and scales disagree on the number of components")
        self.latent_dim = self.means.shape[1]

    def _component_logs(self, z):
        z = check_latent(z, self.latent_dim)
        diff = z[..., None, :] - self.means
        d = self.latent_dim
        sq = np.sum(diff**2, axis=-1) / self.scales**2
        return self.log_weights - 0.5 * sq - d * np.log(self.scales) - 0.5 * d * LOG_2PI, diff

    def log_joint(self, z, theta=None):
        comp, _ = self._component_logs(z)
        return _lse(comp)

    def grad_z_log_joint(self, z, theta=None):
        comp, diff = self._component_logs(z)
        resp = np.exp(comp - _lse(comp)[..., None])
        return -np.sum((resp / self.scales**2)[..., None] * diff, axis=-2)


class LogisticRegressionTarget(TargetModel):
    """Bayesian logistic regression with a standard Normal prior on the weights.

    Parameters
    ----------
    features : array, shape (N, D)
    labels : array of {0, 1}, shape (N,)
    standardize : bool
        Rescale each feature column to zero mean and unit variance.
    """

    def __init__(self, features, labels, standardize=True):
        X = as_float_array(features, "features")
        y = as_float_array(labels, "labels").reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError("features must be (N, D) with one label per row")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        if standardize:
            sd = X.std(axis=0)
            X = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
        self.features = X
        self.labels = y
        self.latent_dim = X.shape[1]
        # sign = +1 for y=1 and -1 for y=0, so each term is log sigma(sign * logit)
        self._signed = X * (2.0 * y - 1.0)[:, None]

    @property
    def n_data(self):
        return self.features.shape[0]

    def log_joint(self, z, theta=None):
        z = check_latent(z, self.latent_dim)
        prior = -0.5 * np.sum(z**2, axis=-1) - 0.5 * self.latent_dim * LOG_2PI
        return prior + np.sum(log_expit(z @ self._signed.T), axis=-1)

    def grad_z_log_joint(self, z, theta=None):
        z = check_latent(z, self.latent_dim)
        return -z + expit(-(z @ self._signed.T)) @ self._signed

    def log_joint_and_grad(self, z, theta=None):
        z = check_latent(z, self.latent_dim)
        m = z @ self._signed.T
        prior = -0.5 * np.sum(z**2, axis=-1) - 0.5 * self.latent_dim * LOG_2PI
        return prior + np.sum(log_expit(m), axis=-1), -z + expit(-m) @ self._signed


def make_synthetic_logistic(n_data, dim, rng, weight_scale=1.0, log10_feature_scale=None):
    """Gaussian features and labels drawn from a logistic model with N(0, weight_scale^2) weights.

    ``log10_feature_scale=(lo, hi)`` gives each feature column its own scale
    ``10**U(lo, hi)`` (weights are divided by the same factor, so the logits
    keep their distribution), mimicking raw tabular data that has not been
    standardized.
    """
    X = rng.standard_normal((n_data, dim))
    w = weight_scale * rng.standard_normal(dim)
    if log10_feature_scale is not None:
        lo, hi = log10_feature_scale
        col = 10.0 ** rng.uniform(lo, hi, dim)
        X = X * col
        w = w / col
    y = (rng.random(n_data) < expit(X @ w)).astype(float)
    return X, y


class HierStudentTModel(TargetModel):
    """Linear regression with a Student-t likelihood written as a Normal scale mixture.

    Global latent ``z_G = (beta, b)`` with an isotropic Normal prior.  Each
    datapoint has a local latent ``z_n = log lambda_n`` with
    ``lambda_n ~ Gamma(nu/2, rate=nu/2)`` and
    ``y_n ~ N(x_n . beta + b, sigma^2 / lambda_n)``.  Model parameters are
    ``theta = (log nu, log sigma)``.

    As a ``TargetModel`` the latent vector is ``[beta, b, z_1, ..., z_N]``.
    """

    theta_dim = 2

    def __init__(self, features, responses, nu=4.0, sigma=1.0, prior_scale=1.0, learn_theta=False):
        X = as_float_array(features, "features")
        if X.ndim == 1:
            X = X[:, None]
        y = as_float_array(responses, "responses").reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError("features and responses disagree on N")
        self.features = X
        self.responses = y
        self._design = np.hstack([X, np.ones((X.shape[0], 1))])
        self.prior_scale = float(prior_scale)
        self.learn_theta = bool(learn_theta)
        self.theta = np.array([np.log(nu), np.log(sigma)])
        self.global_dim = X.shape[1] + 1
        self.latent_dim = self.global_dim + X.shape[0]

    @property
    def n_data(self):
        return self.features.shape[0]

    def _idx(self, idx):
        if idx is None:
            return np.arange(self.n_data)
        idx = np.asarray(idx)
        if np.any(idx < 0) or np.any(idx >= self.n_data):
            raise DataIndexError(f"datapoint index out of range for N={self.n_data}")
        return idx

    # -- global prior -------------------------------------------------------
    def log_prior_global(self, z_G):
        z_G = check_latent(z_G, self.global_dim, "z_G")
        s = self.prior_scale
        return np.sum(-0.5 * (z_G / s) ** 2 - np.log(s) - 0.5 * LOG_2PI, axis=-1)

    def grad_log_prior_global(self, z_G):
        return -np.asarray(z_G) / self.prior_scale**2

    # -- local factors ------------------------------------------------------
    def _local_parts(self, z_G, z_loc, idx, theta):
        theta = self._resolve_theta(theta)
        nu, sigma = np.exp(theta[0]), np.exp(theta[1])
        z_G = check_latent(z_G, self.global_dim, "z_G")
        mean = z_G @ self._design[idx].T  # (..., B)
        resid = self.responses[idx] - mean
        z_loc = np.asarray(z_loc, dtype=np.float64)
        # broadcast the per-datapoint residual over trailing sample axes of z_loc
        extra = z_loc.ndim - resid.ndim
        resid = resid.reshape(resid.shape + (1,) * max(extra, 0))
        return nu, sigma, resid, z_loc

    def local_log_joint_batch(self, z_G, z_loc, idx=None, theta=None):
        """Log of ``p(y_n | z_n, z_G) p(z_n)`` including the log-lambda Jacobian.

        ``z_loc`` has shape ``z_G.shape[:-1] + (B,) + sample_shape`` where
        ``B = len(idx)``; the result has the shape of ``z_loc``.
        """
        idx = self._idx(idx)
        nu, sigma, r, z = self._local_parts(z_G, z_loc, idx, theta)
        alpha = 0.5 * nu
        lam = np.exp(z)
        return (alpha * np.log(alpha) - gammaln(alpha) + (alpha + 0.5) * z - alpha * lam
                - 0.5 * LOG_2PI - np.log(sigma) - 0.5 * r**2 * lam / sigma**2)

    def local_log_joint(self, z_G, n, z_n, theta=None):
        """Single-datapoint local factor for datapoint ``n``."""
        n = int(n)
        if not 0 <= n < self.n_data:
            raise DataIndexError(f"datapoint {n} out of range for N={self.n_data}")
        z_n = np.asarray(z_n, dtype=np.float64)
        out = self.local_log_joint_batch(np.asarray(z_G), z_n[..., None, :] if z_n.ndim else z_n.reshape(1, 1),
                                         idx=[n], theta=theta)
        return out[..., 0, :] if z_n.ndim else float(out.reshape(()))

    def grad_local_z(self, z_G, z_loc, idx=None, theta=None):
        idx = self._idx(idx)
        nu, sigma, r, z = self._local_parts(z_G, z_loc, idx, theta)
        alpha = 0.5 * nu
        lam = np.exp(z)
        return alpha + 0.5 - alpha * lam - 0.5 * r**2 * lam / sigma**2

    def grad_local_mean(self, z_G, z_loc, idx=None, theta=None):
        """Derivative of each local factor w.r.t. the regression mean ``x_n . beta + b``."""
        idx = self._idx(idx)
        nu, sigma, r, z = self._local_parts(z_G, z_loc, idx, theta)
        return r * np.exp(z) / sigma**2

    def grad_local_global(self, z_G, z_loc, idx=None, theta=None):
        """Gradient of each local factor w.r.t. ``z_G``; trailing axis of length ``global_dim``."""
        idx = self._idx(idx)
        dm = self.grad_local_mean(z_G, z_loc, idx, theta)
        n_sample_axes = dm.ndim - np.ndim(z_G)
        design = self._design[idx].reshape((len(idx),) + (1,) * n_sample_axes + (self.global_dim,))
        return dm[..., None] * design

    def grad_local_theta(self, z_G, z_loc, idx=None, theta=None):
        """Gradient of each local factor w.r.t. ``(log nu, log sigma)``."""
        idx = self._idx(idx)
        nu, sigma, r, z = self._local_parts(z_G, z_loc, idx, theta)
        alpha = 0.5 * nu
        lam = np.exp(z)
        d_lognu = alpha * (np.log(alpha) + 1.0 - digamma(alpha) + z - lam)
        d_logsigma = -1.0 + r**2 * lam / sigma**2
        return np.stack(np.broadcast_arrays(d_lognu, d_logsigma), axis=-1)

    def log_marginal_local(self, z_G, idx=None, theta=None):
        """Closed-form Student-t log density of ``y_n`` with ``lambda_n`` integrated out."""
        idx = self._idx(idx)
        theta = self._resolve_theta(theta)
        nu, sigma = np.exp(theta[0]), np.exp(theta[1])
        z_G = check_latent(z_G, self.global_dim, "z_G")
        r = self.responses[idx] - z_G @ self._design[idx].T
        return (gammaln(0.5 * (nu + 1)) - gammaln(0.5 * nu) - 0.5 * np.log(nu * np.pi) - np.log(sigma)
                - 0.5 * (nu + 1) * np.log1p((r / sigma) ** 2 / nu))

    def grad_log_marginal_global(self, z_G, idx=None, theta=None):
        idx = self._idx(idx)
        theta = self._resolve_theta(theta)
        nu, sigma = np.exp(theta[0]), np.exp(theta[1])
        r = self.responses[idx] - np.asarray(z_G) @ self._design[idx].T
        dm = (nu + 1) * r / (nu * sigma**2 + r**2)
        return dm @ self._design[idx]

    # -- TargetModel over the concatenated latent ---------------------------
    def _split(self, z):
        z = check_latent(z, self.latent_dim)
        return z[..., :self.global_dim], z[..., self.global_dim:]

    def log_joint(self, z, theta=None):
        z_G, z_loc = self._split(z)
        return self.log_prior_global(z_G) + np.sum(self.local_log_joint_batch(z_G, z_loc, theta=theta), axis=-1)

    def grad_z_log_joint(self, z, theta=None):
        z_G, z_loc = self._split(z)
        dm = self.grad_local_mean(z_G, z_loc, theta=theta)
        g_glob = self.grad_log_prior_global(z_G) + dm @ self._design
        return np.concatenate([g_glob, self.grad_local_z(z_G, z_loc, theta=theta)], axis=-1)

    def _grad_theta(self, z, theta):
        z_G, z_loc = self._split(z)
        return np.sum(self.grad_local_theta(z_G, z_loc, theta=theta), axis=-2)

    def marginal_target(self):
        """Global-only target with every ``lambda_n`` integrated out (the oracle model)."""
        return StudentTMarginalTarget(self)


class StudentTMarginalTarget(TargetModel):
    """``log p(z_G) + sum_n log StudentT(y_n | x_n . beta + b, sigma, nu)``."""

    def __init__(self, model):
        self.model = model
        self.latent_dim = model.global_dim
        self.theta = model.theta

    def log_joint(self, z, theta=None):
        z = check_latent(z, self.latent_dim)
        m = self.model
        return m.log_prior_global(z) + np.sum(m.log_marginal_local(z, theta=theta), axis=-1)

    def grad_z_log_joint(self, z, theta=None):
        z = check_latent(z, self.latent_dim)
        m = self.model
        return m.grad_log_prior_global(z) + m.grad_log_marginal_global(z, theta=theta)


def make_heavy_tailed_regression(n_data, dim, rng, noise=0.5, outlier_frac=0.25, outlier_scale=3.0):
    """Synthetic linear-regression data where a fraction of points gets extra Normal noise."""
    X = rng.standard_normal((n_data, dim))
    beta = rng.standard_normal(dim)
    b = rng.standard_normal()
    y = X @ beta + b + noise * rng.standard_normal(n_data)
    hit = rng.random(n_data) < outlier_frac
    y[hit] += outlier_scale * rng.standard_normal(hit.sum())
    return X, y


def load_dataset(path, task="binary", delimiter=None):
    """Read delimiter-separated numeric rows; the last column is the label or response.

    No header is allowed.  With ``delimiter=None`` a comma is used if present on
    the first row, otherwise whitespace.  Any malformed row raises
    ``DataFormatError``.
    """
    rows = []
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise DataFormatError(f"{path}: no data rows")
    if delimiter is None:
        delimiter = "," if "," in lines[0] else None
    width = None
    for lineno, line in enumerate(lines, 1):
        fields = line.split(delimiter)
        try:
            values = [float(f) for f in fields]
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
        if width is None:
            width = len(values)
            if width < 2:
                raise DataFormatError(f"{path}:{lineno}: need at least one feature and a target")
        elif len(values) != width:
            raise DataFormatError(f"{path}:{lineno}: expected {width} fields, got {len(values)}")
        if not all(np.isfinite(values)):
            raise DataFormatError(f"{path}:{lineno}: non-finite value")
        rows.append(values)
    data = np.array(rows)
    X, y = data[:, :-1], data[:, -1]
    if task == "binary" and not np.all((y == 0) | (y == 1)):
        raise DataFormatError(f"{path}: labels must be 0 or 1 for a binary task")
    return X, y
