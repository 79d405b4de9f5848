"""Deterministic ground truth for low-dimensional problems.

Everything here integrates on fixed grids (trapezoid or Gauss-Hermite) in one
or two dimensions, so results are exactly reproducible and independent of the
Monte Carlo machinery they are used to check.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionError, DivergentXiError
from .sampler import AcceptanceConfig, acceptance_terms

DEFAULT_NODES = 2001
DEFAULT_WIDTH = 12.0


@dataclass(frozen=True)
class QuadratureGrid:
    """Nodes ``(K, D)`` and weights ``(K,)`` so that ``sum(w * f(nodes)) ~ integral of f``."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def dim(self):
        return self.nodes.shape[-1]

    @classmethod
    def trapezoid(cls, lo, hi, n=DEFAULT_NODES):
        x = np.linspace(lo, hi, n)
        w = np.full(n, (hi - lo) / (n - 1))
        w[[0, -1]] *= 0.5
        return cls(x[:, None], w)

    @classmethod
    def gauss_hermite(cls, mu, sigma, n=80):
        t, w = np.polynomial.hermite.hermgauss(n)
        scale = math.sqrt(2.0) * sigma
        return cls((mu + scale * t)[:, None], w * np.exp(t**2) * scale)

    @classmethod
    def product(cls, gx, gy):
        X, Y = np.meshgrid(gx.nodes[:, 0], gy.nodes[:, 0], indexing="ij")
        W = np.outer(gx.weights, gy.weights)
        return cls(np.stack([X.ravel(), Y.ravel()], axis=-1), W.ravel())

    @classmethod
    def around(cls, proposal, n=DEFAULT_NODES, width=DEFAULT_WIDTH, extra=None):
        """Trapezoid grid over ``mean +/- width`` marginal standard deviations of ``proposal``.

        ``extra`` is an optional list of ``(lo, hi)`` bounds per axis to include.
        """
        mu = np.asarray(proposal.mu).reshape(-1)
        sd = np.asarray(proposal.marginal_scale()).reshape(-1)
        if mu.size > 2:
            raise DimensionError("quadrature oracles support D <= 2")
        axes = []
        for d in range(mu.size):
            lo, hi = mu[d] - width * sd[d], mu[d] + width * sd[d]
            if extra is not None:
                lo, hi = min(lo, extra[d][0]), max(hi, extra[d][1])
            axes.append(cls.trapezoid(lo, hi, n))
        return axes[0] if len(axes) == 1 else cls.product(*axes)


def _grid_for(proposal, grid, n2d=801):
    if grid is not None:
        if grid.dim > 2:
            raise DimensionError("quadrature oracles support D <= 2")
        return grid
    if proposal.dim > 2:
        raise DimensionError("quadrature oracles support D <= 2")
    return QuadratureGrid.around(proposal, n=DEFAULT_NODES if proposal.dim == 1 else n2d)


@dataclass(frozen=True)
class QuadResult:
    Zr: float
    elbo: float
    log_Zr: float


def quad_summary(target, theta, proposal, cfg, grid=None):
    """Z_r and the exact ELBO of ``r`` by quadrature."""
    grid = _grid_for(proposal, grid)
    z = grid.nodes
    log_p = target.log_joint(z, theta)
    log_q = proposal.log_density(z)
    _, _, _, log_a = acceptance_terms(log_p, log_q, cfg)
    log_qa = log_q + log_a
    log_w = np.log(grid.weights)
    log_Zr = float(logsumexp(log_qa + log_w))
    r = np.exp(log_qa - log_Zr) * grid.weights
    integrand = np.where(r > 0, log_p - log_qa, 0.0)
    elbo = float(np.sum(r * integrand)) + log_Zr
    return QuadResult(math.exp(log_Zr), elbo, log_Zr)


def quad_Zr(target, theta, proposal, cfg, grid=None):
    return quad_summary(target, theta, proposal, cfg, grid).Zr


def quad_elbo(target, theta, proposal, cfg, grid=None):
    return quad_summary(target, theta, proposal, cfg, grid).elbo


def quad_expectation(f, target, theta, proposal, cfg, grid=None, under="r"):
    """Expectation of ``f(z)`` under ``r`` (or ``q``) by quadrature."""
    grid = _grid_for(proposal, grid)
    z = grid.nodes
    log_q = proposal.log_density(z)
    if under == "q":
        w = np.exp(log_q) * grid.weights
    else:
        _, _, _, log_a = acceptance_terms(target.log_joint(z, theta), log_q, cfg)
        w = np.exp(log_q + log_a) * grid.weights
        w = w / w.sum()
    vals = np.asarray(f(z))
    return np.tensordot(w, vals, axes=(0, 0))


def quad_log_evidence(target, theta, grid):
    """``log of the integral of p(x, z)`` on the given grid."""
    return float(logsumexp(target.log_joint(grid.nodes, theta) + np.log(grid.weights)))


def finite_diff(f, x, h=1e-5):
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


_XI_WIDTHS = (DEFAULT_WIDTH, 2 * DEFAULT_WIDTH, 4 * DEFAULT_WIDTH, 8 * DEFAULT_WIDTH)


def _xi_grid(target, proposal, n=DEFAULT_NODES, width=DEFAULT_WIDTH):
    extra = None
    post = getattr(target, "posterior", None)
    if post is not None:
        m = np.asarray(post.mu).reshape(-1)
        s = np.asarray(post.marginal_scale()).reshape(-1)
        extra = [(m[d] - width * s[d], m[d] + width * s[d]) for d in range(m.size)]
    if proposal.dim == 1:
        return QuadratureGrid.around(proposal, n=n, width=width, extra=extra)
    return QuadratureGrid.around(proposal, n=801, width=width, extra=extra)


def _log_Zp(target, theta, grid):
    if hasattr(target, "log_Zp") and theta is None:
        return target.log_Zp
    return quad_log_evidence(target, theta, grid)


def compute_xi(target, proposal, grid=None, theta=None, edge_tol=1e-12):
    """Tail moment ``E_posterior[p(x, z) / q(z)]``.

    Raises
    ------
    DivergentXiError
        If the integrand has not decayed at the grid edges, i.e. ``q`` is too
        light-tailed relative to the posterior for the moment to exist.
    """
    # a default grid is widened before giving up: near the boundary of existence the integrand
    # decays slowly but still integrably
    grids = [grid] if grid is not None else [_xi_grid(target, proposal, width=w) for w in _XI_WIDTHS]
    for g in grids:
        if g.dim > 2:
            raise DimensionError("quadrature oracles support D <= 2")
        log_p = target.log_joint(g.nodes, theta)
        log_integrand = 2.0 * log_p - _log_Zp(target, theta, g) - proposal.log_density(g.nodes)
        if np.max(log_integrand[_edge_mask(g)]) - log_integrand.max() <= math.log(edge_tol):
            return float(np.exp(logsumexp(log_integrand + np.log(g.weights))))
    raise DivergentXiError("p(x, z)^2 / q(z) does not decay at the grid edges; xi is not finite")


def _edge_mask(grid):
    mask = np.zeros(grid.nodes.shape[0], dtype=bool)
    for d in range(grid.dim):
        col = grid.nodes[:, d]
        mask |= (col == col.min()) | (col == col.max())
    return mask


@dataclass(frozen=True)
class BoundReport:
    """Variational gap ``delta`` at threshold ``T`` against the bound ``1.5 e^T xi``."""

    T: float
    xi: float
    delta: float
    bound: float
    valid: bool
    holds: bool


def check_gap_bound(target, proposal, T_list, grid=None, theta=None, epsilon=0.0):
    """Compare the exact gap ``log Z_p - ELBO(T)`` with ``1.5 e^T xi`` for each ``T``.

    The bound only applies when ``T < -log(2 xi)``; other rows are reported with
    ``valid=False`` and ``holds=True``.
    """
    xi = compute_xi(target, proposal, grid, theta)
    grid = _xi_grid(target, proposal) if grid is None else grid
    log_Zp = _log_Zp(target, theta, grid)
    reports = []
    for T in T_list:
        elbo = quad_elbo(target, theta, proposal, AcceptanceConfig(T, epsilon), grid)
        delta = log_Zp - elbo
        bound = 1.5 * math.exp(T) * xi
        valid = T < -math.log(2.0 * xi)
        reports.append(BoundReport(float(T), xi, delta, bound, valid, (not valid) or delta <= bound))
    return reports
