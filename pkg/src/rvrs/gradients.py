"""Monte Carlo gradient estimators of the rejection-sampled ELBO.

All estimators consume an :class:`~rvrs.sampler.AcceptedBatch` of ``S >= 2``
samples drawn from ``r``; the covariance terms use the leave-one-out identity
``COV[A, B] ~ 1/(S-1) sum_s (A_s - mean A) B_s``, which is unbiased.

Every function accepts batches with leading batch axes and returns one
estimate per batch.
"""

from dataclasses import dataclass

import numpy as np

from .errors import BatchTooSmallError


@dataclass
class GradientEstimate:
    d_phi: np.ndarray
    d_theta: np.ndarray = None
    d_T: float = None
    S_used: int = 0


def _check_S(S):
    if S < 2:
        raise BatchTooSmallError(f"covariance estimators need S >= 2 samples, got {S}")


def _centered(A):
    return A - np.mean(A, axis=-1, keepdims=True)


def rvrs_cotangents(A, a_raw, a, grad_u, epsilon=0.0):
    """Per-sample z-space cotangents of the pathwise estimator.

    Contracting these with the proposal's velocity field and summing over the
    sample axis gives the gradient estimate.  ``grad_u`` is
    ``grad_z log p - grad_z log q`` at each sample.
    """
    S = A.shape[-1]
    _check_S(S)
    if epsilon == 0.0:
        return _cotangents_plain(A, a_raw, grad_u)
    return _cotangents_guarded(A, a_raw, a, grad_u, epsilon)


def _cotangents_plain(A, a, grad_u):
    S = A.shape[-1]
    grad_a = (a * (1.0 - a))[..., None] * grad_u
    grad_A = a[..., None] * grad_u
    return (2.0 / (S - 1)) * _centered(A)[..., None] * grad_a + (1.0 / S) * a[..., None] * grad_A


def _cotangents_guarded(A, a_raw, a, grad_u, epsilon):
    S = A.shape[-1]
    zeta = epsilon / (1.0 - epsilon)
    slope = a_raw * (1.0 - a_raw)
    grad_log_a = ((1.0 - epsilon) * slope / a)[..., None] * grad_u
    grad_A = grad_u - grad_log_a
    w = (zeta + a_raw**2) / (zeta + a_raw)
    dw = slope * (a_raw**2 + 2.0 * zeta * a_raw - zeta) / (zeta + a_raw) ** 2
    cov_part = w[..., None] * grad_log_a + dw[..., None] * grad_u
    return (1.0 / (S - 1)) * _centered(A)[..., None] * cov_part + (1.0 / S) * w[..., None] * grad_A


def rvrs_phi_gradient(target, theta, proposal, cfg, batch):
    """Reparameterized (pathwise) estimate of the ELBO gradient w.r.t. proposal parameters."""
    _check_S(batch.S)
    grad_u = target.grad_z_log_joint(batch.z, theta) - proposal.grad_z_log_density(batch.z)
    cot = rvrs_cotangents(batch.A, batch.a_raw, batch.a, grad_u, cfg.epsilon)
    return np.sum(proposal.velocity_vjp(batch.z, batch.eps, cot), axis=-2)


def score_weight(a_raw, epsilon):
    """Factor ``w`` with ``grad_phi log(q a) = w grad_phi log q``; equals ``a`` when ``epsilon = 0``."""
    if epsilon == 0.0:
        return a_raw
    zeta = epsilon / (1.0 - epsilon)
    return (zeta + a_raw**2) / (zeta + a_raw)


def vrs_phi_gradient(proposal, batch):
    """Score-function estimate ``1/(S-1) sum_s (A_s - mean A) w_s grad_phi log q(z_s)``."""
    S = batch.S
    _check_S(S)
    weight = _centered(batch.A) * score_weight(batch.a_raw, batch.cfg.epsilon)
    return np.sum(weight[..., None] * proposal.score(batch.z), axis=-2) / (S - 1)


def theta_gradient_direct(target, theta, batch):
    """Mean of ``grad_theta log p`` over the batch; drops the covariance term."""
    g = target.grad_theta_log_joint(batch.z, theta)
    return np.mean(g, axis=-2)


def _theta_log_a_factor(a_raw, a, epsilon):
    # d log a / d u
    if epsilon == 0.0:
        return 1.0 - a_raw
    return (1.0 - epsilon) * a_raw * (1.0 - a_raw) / a


def covariance_correction(A, a_raw, a, epsilon, grad):
    """``1/(S-1) sum_s (A_s - mean A) (d log a_s / d u) grad_s`` for a per-sample gradient of ``log p``."""
    S = A.shape[-1]
    _check_S(S)
    weight = _centered(A) * _theta_log_a_factor(a_raw, a, epsilon)
    return np.sum(weight[..., None] * grad, axis=-2) / (S - 1)


def theta_gradient_full(target, theta, batch):
    """Unbiased model-parameter gradient: direct term plus ``COV[A, grad_theta log a]``."""
    _check_S(batch.S)
    g = target.grad_theta_log_joint(batch.z, theta)
    return np.mean(g, axis=-2) + covariance_correction(batch.A, batch.a_raw, batch.a, batch.cfg.epsilon, g)


def t_gradient_from_values(a, Z_tgt):
    """Estimate of d/dT of ``0.5 (Z_r - Z_tgt)^2`` from ``S`` acceptance values.

    ``1/S sum_s a_s (1 - a_s) (mean of the other a's - Z_tgt)``.
    """
    a = np.asarray(a, dtype=np.float64)
    S = a.shape[-1]
    _check_S(S)
    others = (np.sum(a, axis=-1, keepdims=True) - a) / (S - 1)
    return np.mean(a * (1.0 - a) * (others - Z_tgt), axis=-1)


def t_gradient(batch, Z_tgt, source="proposal"):
    """Threshold-adaptation gradient.

    ``source="proposal"`` uses the first ``S`` proposal draws of the batch,
    which are exact draws from ``q`` and make the estimate unbiased.
    ``source="accepted"`` uses the accepted samples instead; under ``r`` the
    fixed point becomes ``E_r[a] = Z_tgt`` rather than ``Z_r = Z_tgt``.
    """
    if not 0.0 < Z_tgt < 1.0:
        raise ValueError("Z_tgt must lie in (0, 1)")
    if source == "proposal":
        values = batch.a_proposal
    elif source == "accepted":
        values = batch.a
    else:
        raise ValueError(f"unknown source {source!r}")
    return t_gradient_from_values(values, Z_tgt)
