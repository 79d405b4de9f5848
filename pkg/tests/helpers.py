"""Ground-truth helpers shared by the test modules."""

import numpy as np

from rvrs.oracle import QuadratureGrid, finite_diff, quad_summary
from rvrs.sampler import AcceptanceConfig


def mean_se(x):
    """Column means and standard errors over the leading axis."""
    x = np.asarray(x)
    return x.mean(axis=0), x.std(axis=0, ddof=1) / np.sqrt(x.shape[0])


def within(x, truth, n_se=4.0):
    m, se = mean_se(x)
    return bool(np.all(np.abs(m - truth) < n_se * se)), m, se


def fixed_grid(target, proposal, n=4001, width=14.0):
    """A grid that stays put while proposal parameters are perturbed."""
    if proposal.dim == 1:
        mu, sd = float(proposal.mu[0]), float(proposal.marginal_scale()[0])
        return QuadratureGrid.trapezoid(mu - width * sd, mu + width * sd, n)
    return QuadratureGrid.around(proposal, n=601, width=10.0)


def elbo_grad_phi(target, theta, proposal, cfg, grid=None, h=1e-5):
    """Finite differences of the quadrature ELBO in the proposal parameters."""
    grid = fixed_grid(target, proposal) if grid is None else grid
    f = lambda v: quad_summary(target, theta, proposal.with_vector(v), cfg, grid).elbo
    return finite_diff(f, proposal.to_vector(), h)


def elbo_grad_theta(target, theta, proposal, cfg, grid=None, h=1e-5):
    grid = fixed_grid(target, proposal) if grid is None else grid
    return finite_diff(lambda th: quad_summary(target, th, proposal, cfg, grid).elbo, np.asarray(theta, float), h)


def t_objective_grad(target, theta, proposal, cfg, Z_tgt, grid=None, h=1e-5):
    """d/dT of 0.5 (Z_r - Z_tgt)^2 by finite differences of the quadrature Z_r."""
    grid = fixed_grid(target, proposal) if grid is None else grid
    f = lambda T: 0.5 * (quad_summary(target, theta, proposal, AcceptanceConfig(T[0], cfg.epsilon), grid).Zr
                         - Z_tgt) ** 2
    return float(finite_diff(f, np.array([cfg.T]), h)[0])
