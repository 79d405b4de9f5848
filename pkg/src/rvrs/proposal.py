"""Reparameterizable Normal proposals.

Both families expose the same surface:

* ``transform(eps)`` / ``sample_reparam(rng, shape)`` -- the sample path
  ``z = mu + L eps``;
* ``log_density``, ``grad_z_log_density`` -- exact Normal log density and its
  z-gradient;
* ``score`` -- the per-parameter gradient of ``log q`` at fixed ``z``;
* ``velocity_vjp`` -- the contraction ``cotangent . d z / d phi`` at fixed noise.

Parameter gradients are flat vectors laid out like ``to_vector()``.  All
z-space arrays carry the latent dimension on the last axis and may have any
number of leading batch axes.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from ._validation import as_float_array, check_latent
from .errors import InconsistentPathError

LOG_2PI = float(np.log(2.0 * np.pi))
_PATH_TOL = 1e-9


def _check_path(z, z_rebuilt):
    gap = np.abs(z - z_rebuilt)
    if np.any(gap > _PATH_TOL * np.maximum(1.0, np.abs(z))):
        raise InconsistentPathError(
            f"z differs from its reparameterized reconstruction by {gap.max():.3e}"
        )


@dataclass(frozen=True)
class NoiseDraw:
    """Standard-Normal innovations that produced a batch of samples."""

    eps: np.ndarray


class _NormalBase:
    def sample_reparam(self, rng, shape=()):
        """Draw ``z = transform(eps)`` with ``eps ~ N(0, I)``.

        Returns ``(z, NoiseDraw)``; ``z`` has shape ``shape + (D,)``.
        """
        if isinstance(shape, int):
            shape = (shape,)
        eps = rng.standard_normal(tuple(shape) + (self.dim,))
        return self.transform(eps), NoiseDraw(eps)

    def sample(self, rng, n):
        return self.sample_reparam(rng, (n,))[0]

    @property
    def n_params(self):
        return self.to_vector().shape[-1]

    def geometric_mean_scale(self):
        """Geometric mean of the marginal standard deviations."""
        return float(np.exp(np.mean(np.log(self.marginal_scale()))))


@dataclass(frozen=True)
class MeanFieldNormal(_NormalBase):
    """Factorized Normal ``N(mu, diag(exp(log_scale))^2)``.

    ``mu`` and ``log_scale`` may carry leading batch axes (used for per-datapoint
    local proposals); they must broadcast against the samples they score.
    """

    mu: np.ndarray
    log_scale: np.ndarray

    def __post_init__(self):
        mu = as_float_array(self.mu, "mu")
        log_scale = as_float_array(self.log_scale, "log_scale")
        if mu.ndim == 0:
            mu = mu.reshape(1)
        if log_scale.shape != mu.shape:
            log_scale = np.broadcast_to(log_scale, mu.shape).copy()
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_scale", log_scale)

    @classmethod
    def standard(cls, dim):
        return cls(np.zeros(dim), np.zeros(dim))

    @classmethod
    def from_vector(cls, vec, dim=None):
        vec = np.asarray(vec, dtype=np.float64)
        dim = vec.shape[-1] // 2 if dim is None else dim
        return cls(vec[..., :dim], vec[..., dim:])

    def to_vector(self):
        return np.concatenate([self.mu, self.log_scale], axis=-1)

    @property
    def dim(self):
        return self.mu.shape[-1]

    @property
    def scale(self):
        return np.exp(self.log_scale)

    def marginal_scale(self):
        return self.scale

    def transform(self, eps):
        return self.mu + self.scale * eps

    def log_density(self, z):
        z = check_latent(z, self.dim)
        white = (z - self.mu) / self.scale
        return np.sum(-0.5 * white**2 - self.log_scale - 0.5 * LOG_2PI, axis=-1)

    def grad_z_log_density(self, z):
        z = check_latent(z, self.dim)
        return -(z - self.mu) / self.scale**2

    def score(self, z):
        z = check_latent(z, self.dim)
        white = (z - self.mu) / self.scale
        return np.concatenate([white / self.scale, white**2 - 1.0], axis=-1)

    def velocity_vjp(self, z, eps, cotangent, check=True):
        """Return ``cotangent . dz/dphi`` for samples on the path ``z = mu + sigma eps``.

        d z / d mu is the identity and d z / d log_scale is ``z - mu``.
        """
        z = check_latent(z, self.dim)
        eps = eps.eps if isinstance(eps, NoiseDraw) else np.asarray(eps)
        if check:
            _check_path(z, self.transform(eps))
        cotangent = np.asarray(cotangent, dtype=np.float64)
        return np.concatenate([cotangent, cotangent * (z - self.mu)], axis=-1)

    def with_vector(self, vec):
        return type(self).from_vector(vec, self.dim)


@dataclass(frozen=True)
class FullRankNormal(_NormalBase):
    """Normal with Cholesky factor ``L = tril(chol_offdiag, -1) + diag(exp(chol_log_diag))``."""

    mu: np.ndarray
    chol_offdiag: np.ndarray
    chol_log_diag: np.ndarray

    def __post_init__(self):
        mu = as_float_array(self.mu, "mu").reshape(-1)
        d = mu.shape[0]
        off = np.tril(as_float_array(self.chol_offdiag, "chol_offdiag").reshape(d, d), -1)
        log_diag = as_float_array(self.chol_log_diag, "chol_log_diag").reshape(d)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "chol_offdiag", off)
        object.__setattr__(self, "chol_log_diag", log_diag)

    @classmethod
    def standard(cls, dim):
        return cls(np.zeros(dim), np.zeros((dim, dim)), np.zeros(dim))

    @classmethod
    def from_cholesky(cls, mu, chol):
        chol = np.asarray(chol, dtype=np.float64)
        diag = np.diag(chol)
        if np.any(diag <= 0):
            raise ValueError("Cholesky factor needs a strictly positive diagonal")
        return cls(mu, np.tril(chol, -1), np.log(diag))

    @classmethod
    def from_meanfield(cls, mf):
        d = mf.dim
        return cls(mf.mu.copy(), np.zeros((d, d)), mf.log_scale.copy())

    @classmethod
    def from_vector(cls, vec, dim):
        vec = np.asarray(vec, dtype=np.float64)
        off = np.zeros((dim, dim))
        off[np.tril_indices(dim, -1)] = vec[2 * dim:]
        return cls(vec[:dim], off, vec[dim:2 * dim])

    def to_vector(self):
        rows, cols = np.tril_indices(self.dim, -1)
        return np.concatenate([self.mu, self.chol_log_diag, self.chol_offdiag[rows, cols]])

    def with_vector(self, vec):
        return type(self).from_vector(vec, self.dim)

    @property
    def dim(self):
        return self.mu.shape[0]

    @property
    def chol(self):
        return self.chol_offdiag + np.diag(np.exp(self.chol_log_diag))

    @property
    def covariance(self):
        L = self.chol
        return L @ L.T

    def marginal_scale(self):
        return np.sqrt(np.diag(self.covariance))

    def transform(self, eps):
        return self.mu + np.asarray(eps) @ self.chol.T

    def _whiten(self, z):
        # rows of the result are L^{-1} (z - mu)
        r = (z - self.mu).reshape(-1, self.dim)
        return solve_triangular(self.chol, r.T, lower=True).T

    def log_density(self, z):
        z = check_latent(z, self.dim)
        w = self._whiten(z)
        out = -0.5 * np.sum(w**2, axis=-1) - np.sum(self.chol_log_diag) - 0.5 * self.dim * LOG_2PI
        return out.reshape(z.shape[:-1])

    def _precision_residual(self, w):
        # rows of the result are L^{-T} w = Sigma^{-1} (z - mu)
        return solve_triangular(self.chol.T, w.T, lower=False).T

    def grad_z_log_density(self, z):
        z = check_latent(z, self.dim)
        v = self._precision_residual(self._whiten(z))
        return -v.reshape(z.shape)

    def score(self, z):
        z = check_latent(z, self.dim)
        d = self.dim
        w = self._whiten(z)
        v = self._precision_residual(w)
        diag_L = np.exp(self.chol_log_diag)
        rows, cols = np.tril_indices(d, -1)
        g_diag = v * w * diag_L - 1.0
        g_off = v[:, rows] * w[:, cols]
        out = np.concatenate([v, g_diag, g_off], axis=-1)
        return out.reshape(z.shape[:-1] + (out.shape[-1],))

    def velocity_vjp(self, z, eps, cotangent, check=True):
        """Return ``cotangent . dz/dphi`` for ``z = mu + L eps``.

        The L-block is the outer product ``cotangent eps^T`` restricted to the
        lower triangle, with the diagonal chain-ruled through ``log L_ii``.
        """
        z = check_latent(z, self.dim)
        eps = eps.eps if isinstance(eps, NoiseDraw) else np.asarray(eps)
        if check:
            _check_path(z, self.transform(eps))
        c = np.asarray(cotangent, dtype=np.float64)
        rows, cols = np.tril_indices(self.dim, -1)
        g_diag = c * eps * np.exp(self.chol_log_diag)
        g_off = c[..., rows] * eps[..., cols]
        return np.concatenate([c, g_diag, g_off], axis=-1)


def sum_samples(per_sample):
    """Sum a per-sample parameter gradient over the sample axis (second to last)."""
    return np.sum(per_sample, axis=-2)
