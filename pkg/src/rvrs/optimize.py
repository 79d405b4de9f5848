"""Adam, the step-decay schedule, and the training loops.

Training follows two phases: a conventional mean-field ELBO fit that
initializes the proposal, then joint optimization of the proposal (Adam), the
threshold ``T`` (plain SGD on ``0.5 (Z_r - Z_tgt)^2``) and optionally the
model parameters.
"""

from dataclasses import dataclass, field, replace
import math

import numpy as np

from . import gradients as G
from .errors import DivergedError, ShapeError
from .proposal import FullRankNormal, MeanFieldNormal
from .rng import stream
from .sampler import AcceptanceConfig, estimate_log_Zr, evaluate_elbo, rejection_sample


@dataclass(frozen=True)
class AdamState:
    """Adam moments.  ``step`` may be an array for row-wise (lazy) updates."""

    m: np.ndarray
    v: np.ndarray
    step: object = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    base_lr: float = 1e-3

    @classmethod
    def zeros_like(cls, params, base_lr=1e-3, rowwise=False, **kw):
        params = np.asarray(params, dtype=np.float64)
        step = np.zeros(params.shape[0], dtype=np.int64) if rowwise else 0
        return cls(np.zeros_like(params), np.zeros_like(params), step, base_lr=base_lr, **kw)


def adam_step(state, params, grad, lr=None, rows=None):
    """One bias-corrected Adam *ascent* step.

    ``rows`` restricts the update to the given leading-axis rows, each with its
    own step counter (requires a state built with ``rowwise=True``).
    Returns ``(new_state, new_params)``.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    lr = state.base_lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    if rows is None:
        if grad.shape != params.shape or state.m.shape != params.shape:
            raise ShapeError(f"gradient {grad.shape} / moments {state.m.shape} vs parameters {params.shape}")
        t = state.step + 1
        m = b1 * state.m + (1 - b1) * grad
        v = b2 * state.v + (1 - b2) * grad * grad
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new = params + lr * mhat / (np.sqrt(vhat) + state.eps_adam)
        return replace(state, m=m, v=v, step=t), new
    rows = np.asarray(rows)
    if grad.shape != params[rows].shape:
        raise ShapeError(f"row gradient {grad.shape} vs parameter rows {params[rows].shape}")
    step = state.step.copy()
    step[rows] += 1
    t = step[rows].reshape((-1,) + (1,) * (params.ndim - 1))
    m = state.m.copy()
    v = state.v.copy()
    m[rows] = b1 * m[rows] + (1 - b1) * grad
    v[rows] = b2 * v[rows] + (1 - b2) * grad * grad
    new = params.copy()
    new[rows] += lr * (m[rows] / (1 - b1**t)) / (np.sqrt(v[rows] / (1 - b2**t)) + state.eps_adam)
    return replace(state, m=m, v=v, step=step), new


def lr_schedule(it, total_iters, base_lr):
    """Step decay: divide by 10 after one third and again after two thirds of training."""
    if it < total_iters / 3:
        return base_lr
    if it < 2 * total_iters / 3:
        return base_lr / 10
    return base_lr / 100


@dataclass
class TrainConfig:
    """Hyperparameters of the two-phase training procedure.

    Defaults follow the reference recipe: ``S=2``, ``epsilon=1e-4``, Adam with
    base learning rate ``1e-4`` for the rejection-sampled phase and ``1e-3``
    for the mean-field phase, both decimated twice.
    """

    total_iters: int = 10_000
    S: int = 2
    Z_tgt: float = 0.3
    epsilon: float = 1e-4
    base_lr: float = 1e-4
    seed: int = 0
    learn_theta: bool = False
    theta_estimator: str = "direct"
    theta_lr: float = None
    meanfield_iters: int = 10_000
    meanfield_lr: float = 1e-3
    meanfield_S: int = 1
    family: str = "meanfield"
    t_source: str = "proposal"
    t_lr: float = 1.0
    t_average_tail: float = 1.0 / 3.0
    init_T_samples: int = 1000
    trace_every: int = 100
    eval_every: int = 0
    eval_samples: int = 20_000
    max_proposals: int = None

    def __post_init__(self):
        if not 0.0 < self.Z_tgt < 1.0:
            raise ValueError("Z_tgt must lie in (0, 1)")
        if self.S < 2:
            raise ValueError("S must be at least 2")
        if self.theta_estimator not in ("direct", "full"):
            raise ValueError("theta_estimator must be 'direct' or 'full'")
        if self.family not in ("meanfield", "fullrank"):
            raise ValueError("family must be 'meanfield' or 'fullrank'")


@dataclass
class TrainResult:
    proposal: object
    acceptance: AcceptanceConfig
    theta: np.ndarray
    trace: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    meanfield: object = None
    meanfield_trace: list = field(default_factory=list)


TRACE_FIELDS = ("iter", "elbo_proxy", "T", "Zr_hat", "lr")


def _check_finite(vec, last_good, what):
    if not np.all(np.isfinite(vec)):
        raise DivergedError(f"non-finite {what}", last_good=last_good)


def reparam_gradient(target, theta, proposal, z, eps):
    """Standard reparameterized ELBO gradient averaged over the sample axis."""
    cot = target.grad_z_log_joint(z, theta) - proposal.grad_z_log_density(z)
    return np.mean(proposal.velocity_vjp(z, eps, cot, check=False), axis=-2)


def fit_meanfield(target, theta=None, init=None, cfg=None, rng=None, n_iters=None):
    """Maximize the conventional ELBO with the reparameterized gradient.

    ``init`` may be a mean-field or full-rank Normal (the family is kept).
    Returns ``(proposal, trace)`` where ``trace`` holds per-iteration
    single-batch ELBO estimates.
    """
    cfg = TrainConfig() if cfg is None else cfg
    n_iters = cfg.meanfield_iters if n_iters is None else n_iters
    seed = cfg.seed if rng is None else rng
    if init is None:
        init = MeanFieldNormal.standard(target.latent_dim)
        if cfg.family == "fullrank":
            init = FullRankNormal.from_meanfield(init)
    q = init
    vec = q.to_vector()
    state = AdamState.zeros_like(vec, base_lr=cfg.meanfield_lr)
    trace = []
    for it in range(n_iters):
        rng_it = stream(seed, 1, it)
        z, noise = q.sample_reparam(rng_it, (cfg.meanfield_S,))
        log_w = target.log_joint(z, theta) - q.log_density(z)
        g = reparam_gradient(target, theta, q, z, noise.eps)
        elbo = float(np.mean(log_w))
        if not math.isfinite(elbo):
            raise DivergedError("ELBO estimate is not finite", last_good=q)
        trace.append(elbo)
        state, new = adam_step(state, vec, g, lr_schedule(it, n_iters, cfg.meanfield_lr))
        _check_finite(new, q, "proposal parameters")
        vec = new
        q = q.with_vector(vec)
    return q, trace


def elbo_meanfield(target, theta, proposal, rng, n=1000):
    z = proposal.sample(rng, n)
    return float(np.mean(target.log_joint(z, theta) - proposal.log_density(z)))


def tail_average(values, fraction):
    """Mean of the last ``fraction`` of ``values`` (the last value if the tail is empty)."""
    n = int(len(values) * fraction)
    return float(np.mean(values[-n:])) if n > 0 else float(values[-1])


def adapt_threshold(target, theta, proposal, cfg, Z_tgt, n_steps, rng, S=2, lr=1.0, source="proposal",
                    average_tail=1.0 / 3.0):
    """Tune ``T`` alone for a fixed proposal by SGD on ``0.5 (Z_r - Z_tgt)^2``.

    With a constant step size the iterates keep fluctuating around the fixed
    point, so the returned threshold is the average over the last
    ``average_tail`` fraction of steps.

    Returns
    -------
    cfg : AcceptanceConfig
        Configuration with the averaged threshold.
    Ts : ndarray
        Raw SGD trajectory of ``T``.
    """
    Ts = []
    seed = rng
    for it in range(n_steps):
        batch = rejection_sample(target, theta, proposal, cfg, stream(seed, 3, it), S)
        cfg = cfg.with_T(cfg.T - lr * float(G.t_gradient(batch, Z_tgt, source)))
        Ts.append(cfg.T)
    Ts = np.array(Ts)
    return cfg.with_T(tail_average(Ts, average_tail)), Ts


def _fit_rejection(target, theta, cfg, rng, estimator, init=None):
    seed = cfg.seed if rng is None else rng
    if init is None:
        q0, mf_trace = fit_meanfield(target, theta, cfg=cfg, rng=seed)
    else:
        q0, mf_trace = init, []
    theta = None if theta is None else np.asarray(theta, dtype=np.float64)
    T0 = -elbo_meanfield(target, theta, q0, stream(seed, 4), cfg.init_T_samples)
    acc = AcceptanceConfig(T0, cfg.epsilon)
    q = q0
    vec = q.to_vector()
    state = AdamState.zeros_like(vec, base_lr=cfg.base_lr)
    learn_theta = cfg.learn_theta and theta is not None and target.theta_dim > 0
    if learn_theta:
        theta_lr = cfg.base_lr if cfg.theta_lr is None else cfg.theta_lr
        th_state = AdamState.zeros_like(theta, base_lr=theta_lr)
    result = TrainResult(q, acc, theta, meanfield=q0, meanfield_trace=mf_trace)
    window_A, window_acc, window_prop = [], 0, 0
    T_path = []
    max_prop = cfg.max_proposals
    for it in range(cfg.total_iters):
        batch = rejection_sample(target, theta, q, acc, stream(seed, 2, it), cfg.S, max_proposals=max_prop)
        if estimator == "rvrs":
            g = G.rvrs_phi_gradient(target, theta, q, acc, batch)
        else:
            g = G.vrs_phi_gradient(q, batch)
        d_T = float(G.t_gradient(batch, cfg.Z_tgt, cfg.t_source))
        lr = lr_schedule(it, cfg.total_iters, cfg.base_lr)
        _check_finite(g, result, "gradient")
        state, new = adam_step(state, vec, g, lr)
        _check_finite(new, result, "proposal parameters")
        if learn_theta:
            if cfg.theta_estimator == "full":
                g_th = G.theta_gradient_full(target, theta, batch)
            else:
                g_th = G.theta_gradient_direct(target, theta, batch)
            th_state, theta = adam_step(th_state, theta, g_th, lr_schedule(it, cfg.total_iters, th_state.base_lr))
            _check_finite(theta, result, "model parameters")
        vec = new
        q = q.with_vector(vec)
        acc = acc.with_T(acc.T - cfg.t_lr * d_T)
        T_path.append(acc.T)
        result.proposal, result.acceptance, result.theta = q, acc, theta

        window_A.append(float(np.mean(batch.A)))
        window_acc += batch.S
        window_prop += batch.total_proposals
        if (it + 1) % cfg.trace_every == 0 or it + 1 == cfg.total_iters:
            result.trace.append({"iter": it + 1, "elbo_proxy": float(np.mean(window_A)), "T": acc.T,
                                 "Zr_hat": window_acc / window_prop, "lr": lr})
            window_A, window_acc, window_prop = [], 0, 0
        if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            elbo = evaluate_elbo(target, theta, q, acc, stream(seed, 5, it), S=cfg.eval_samples,
                                 M=cfg.eval_samples)
            result.checkpoints.append({"iter": it + 1, "elbo": elbo})
    if T_path:
        # the proposal barely moves in the last lr phase; average out SGD noise in T
        result.acceptance = acc.with_T(tail_average(T_path, cfg.t_average_tail))
    return result


def fit_rvrs(target, theta=None, cfg=None, rng=None, init=None):
    """Train the rejection-sampled family with the pathwise proposal gradient.

    Returns a :class:`TrainResult` with the final proposal, threshold,
    model parameters and traces.
    """
    return _fit_rejection(target, theta, TrainConfig() if cfg is None else cfg, rng, "rvrs", init)


def fit_vrs(target, theta=None, cfg=None, rng=None, init=None):
    """Same loop as :func:`fit_rvrs` but with the score-function proposal gradient."""
    return _fit_rejection(target, theta, TrainConfig() if cfg is None else cfg, rng, "vrs", init)


def final_log_Zr(result, target, rng, M=100_000):
    return estimate_log_Zr(target, result.theta, result.proposal, result.acceptance, rng, M)
