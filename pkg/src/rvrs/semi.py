"""Hybrid inference for hierarchical models.

Global latents get a parametric Normal ``q(z_G)``; each datapoint's local
latent gets its own rejection-sampled distribution
``r_n(z_n | z_G) ~ q_n(z_n) a_n(z_n | z_G)`` with a per-datapoint threshold
``T_n``.  Local proposals are 1-D mean-field Normals that do not depend on
``z_G``.

The model object must provide the interface of
:class:`~rvrs.target.HierStudentTModel` (``local_log_joint_batch``,
``grad_local_z``, ``grad_local_global``, ``grad_local_theta``,
``log_prior_global``, ``grad_log_prior_global``).
"""

from dataclasses import dataclass, field
import math

import numpy as np

from . import gradients as G
from ._validation import check_positive_int
from .errors import EmptyMaskError
from .optimize import AdamState, adam_step, fit_meanfield, lr_schedule, TrainConfig
from .proposal import MeanFieldNormal
from .rng import stream
from .sampler import AcceptanceConfig, acceptance_terms, draw_accepted


@dataclass
class LocalThresholds:
    """Per-datapoint thresholds ``T_n`` sharing one target acceptance rate."""

    T: np.ndarray
    Z_tgt: float
    epsilon: float = 0.0

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.float64).copy()
        if not np.all(np.isfinite(self.T)):
            raise ValueError("thresholds must be finite")
        if not 0.0 < self.Z_tgt < 1.0:
            raise ValueError("Z_tgt must lie in (0, 1)")

    def config(self, n):
        return AcceptanceConfig(self.T[n], self.epsilon)


@dataclass
class LocalBatch:
    """Local samples for a mini-batch of datapoints at one global draw.

    ``z`` and ``eps`` have shape ``(B, S, 1)``; the per-sample caches have
    shape ``(B, S)``.  ``a_proposal`` holds the guarded acceptance of the
    first ``S`` proposal draws of each datapoint.  ``proposals_used`` counts,
    per datapoint, the draws consumed up to the ``S``-th acceptance
    (``S_prime`` for the biased sampler).
    """

    indices: np.ndarray
    z: np.ndarray
    eps: np.ndarray
    log_p: np.ndarray
    log_q: np.ndarray
    a_raw: np.ndarray
    a: np.ndarray
    A: np.ndarray
    a_proposal: np.ndarray
    mask: np.ndarray
    proposals_used: np.ndarray
    epsilon: float = 0.0
    z_G: np.ndarray = None
    eps_G: np.ndarray = None

    @property
    def S(self):
        return self.z.shape[1]

    @property
    def mask_rate(self):
        return float(np.mean(self.mask))


@dataclass(frozen=True)
class SemiEvalConfig:
    """Outer (global) and inner (local) sample counts of the evaluation bound."""

    M1: int = 10_000
    M2: int = 1_000

    def __post_init__(self):
        check_positive_int(self.M1, "M1")
        check_positive_int(self.M2, "M2")


def local_subset(local_proposals, idx):
    """Mean-field Normal over the selected datapoints, shaped ``(B, 1, 1)`` to broadcast over samples."""
    mu = np.asarray(local_proposals.mu).reshape(-1)[idx]
    ls = np.asarray(local_proposals.log_scale).reshape(-1)[idx]
    return MeanFieldNormal(mu[:, None, None], ls[:, None, None])


def _datapoint_rngs(rng, indices):
    if isinstance(rng, (list, tuple)) and rng and isinstance(rng[0], np.random.Generator):
        if len(rng) != len(indices):
            raise ValueError("need one generator per datapoint")
        return list(rng)
    key = rng if isinstance(rng, tuple) else (rng,)
    return [stream(*key, int(n)) for n in indices]


def semi_sample_unbiased(model, theta, z_G, local_proposals, thresholds, indices, S, rng, max_proposals=None):
    """Exactly ``S`` accepted local samples per datapoint.

    Each datapoint runs the ordinary rejection loop on its own stream, so the
    samples of datapoint ``n`` do not depend on which other datapoints share
    the batch.  ``rng`` is either a key (int or tuple) from which the stream of
    datapoint ``n`` is derived as ``stream(*key, n)``, or a list of generators
    aligned with ``indices``.

    Raises
    ------
    BudgetExhaustedError
        If any datapoint needs more than ``max_proposals`` draws (default
        ``10**6 * S``).
    """
    G._check_S(S)
    indices = np.asarray(indices)
    rngs = _datapoint_rngs(rng, indices)
    max_proposals = 10**6 * S if max_proposals is None else max_proposals
    mu = np.asarray(local_proposals.mu).reshape(-1)
    ls = np.asarray(local_proposals.log_scale).reshape(-1)
    keys = ("z", "eps", "log_p", "log_q", "a_raw", "a", "log_a", "a_head")
    cols = {k: [] for k in keys + ("used",)}
    for n, gen in zip(indices, rngs):
        q_n = MeanFieldNormal(mu[n:n + 1], ls[n:n + 1])
        n_idx = [int(n)]

        def log_target(z, n_idx=n_idx):
            return model.local_log_joint_batch(z_G, z[..., 0][None], n_idx, theta)[0]

        out = draw_accepted(log_target, q_n, thresholds.config(n), gen, S, max_proposals)
        for k in keys:
            cols[k].append(out[k])
        # draws up to and including the S-th acceptance (chunk overshoot is not counted)
        cols["used"].append(int(out["proposals_used"].sum()))
    st = {k: np.stack(v) if k != "used" else np.array(v) for k, v in cols.items()}
    A = st["log_p"] - st["log_q"] - st["log_a"]
    return LocalBatch(indices, st["z"], st["eps"], st["log_p"], st["log_q"], st["a_raw"], st["a"], A,
                      st["a_head"], np.ones(len(indices), dtype=bool), st["used"], thresholds.epsilon,
                      None if z_G is None else np.asarray(z_G))


def semi_sample_biased(model, theta, z_G, local_proposals, thresholds, indices, S, S_prime, rng):
    """Fixed-cost sampler: ``S_prime`` proposals per datapoint, accepted ones moved to the front.

    A datapoint is masked in only if at least ``S`` of its proposals were
    accepted; masked-out datapoints are dropped from the gradient.
    """
    G._check_S(S)
    if S_prime < S:
        raise ValueError("S_prime must be at least S")
    indices = np.asarray(indices)
    rng = rng if isinstance(rng, np.random.Generator) else stream(*(rng if isinstance(rng, tuple) else (rng,)))
    q = local_subset(local_proposals, indices)
    B = len(indices)
    eps = rng.standard_normal((B, S_prime, 1))
    unif = rng.random((B, S_prime))
    z = q.transform(eps)
    log_p = model.local_log_joint_batch(z_G, z[..., 0], indices, theta)
    log_q = q.log_density(z)
    # per-row thresholds: fold T_n into the proposal term and use a zero global T
    T = thresholds.T[indices][:, None]
    _, a_raw, a, log_a = acceptance_terms(log_p, log_q - T, AcceptanceConfig(0.0, thresholds.epsilon))
    acc = unif < a
    # stable partition: accepted proposals first, original order kept within each group
    order = np.argsort(~acc, axis=1, kind="stable")[:, :S]
    take = lambda x: np.take_along_axis(x, order, axis=1)
    mask = acc.sum(axis=1) >= S
    A = log_p - log_q - log_a
    return LocalBatch(indices, np.take_along_axis(z, order[..., None], axis=1),
                      np.take_along_axis(eps, order[..., None], axis=1), take(log_p), take(log_q),
                      take(a_raw), take(a), take(A), a[:, :S].copy(), mask,
                      np.full(B, S_prime), thresholds.epsilon, None if z_G is None else np.asarray(z_G))


@dataclass
class SemiGradient:
    d_global: np.ndarray
    d_local: np.ndarray
    local_rows: np.ndarray
    d_theta: np.ndarray = None
    B_eff: int = 0


def semi_elbo_gradient(model, theta, q_global, local_proposals, batch, N_total, eps_G=None,
                       covariance_correction=True):
    """Stochastic gradient of the hybrid ELBO.

    Global proposal gradient: pathwise through ``z_G`` of
    ``log p(z_G) - log q(z_G) + (N_total / B_eff) sum_n ELBO_n(z_G)`` over
    masked-in datapoints, where the ``z_G``-derivative of each local ELBO
    includes the covariance correction (drop it with
    ``covariance_correction=False``).  Local proposal gradients are the
    pathwise estimates of each datapoint's local ELBO, returned per row.
    The model-parameter gradient uses the direct estimator.

    Raises
    ------
    EmptyMaskError
        If every datapoint of the batch is masked out.
    """
    G._check_S(batch.S)
    mask = np.asarray(batch.mask, dtype=bool)
    B_eff = int(mask.sum())
    if B_eff == 0:
        raise EmptyMaskError("all datapoints of the batch are masked out")
    z_G = batch.z_G
    eps_G = batch.eps_G if eps_G is None else eps_G
    idx = batch.indices[mask]
    z = batch.z[mask]
    zl = z[..., 0]
    A, a_raw, a = batch.A[mask], batch.a_raw[mask], batch.a[mask]
    scale = N_total / B_eff

    g_loc_glob = model.grad_local_global(z_G, zl, idx, theta)  # (B, S, Dg)
    per_point = np.mean(g_loc_glob, axis=1)
    if covariance_correction:
        per_point = per_point + G.covariance_correction(A, a_raw, a, batch.epsilon, g_loc_glob)
    cot_G = model.grad_log_prior_global(z_G) - q_global.grad_z_log_density(z_G) + scale * per_point.sum(axis=0)
    d_global = q_global.velocity_vjp(z_G, eps_G, cot_G)

    q_loc = local_subset(local_proposals, idx)
    grad_u = model.grad_local_z(z_G, zl, idx, theta)[..., None] - q_loc.grad_z_log_density(z)
    cot = G.rvrs_cotangents(A, a_raw, a, grad_u, batch.epsilon)
    d_local = np.sum(q_loc.velocity_vjp(z, batch.eps[mask], cot), axis=1)

    g_th = model.grad_local_theta(z_G, zl, idx, theta)
    d_theta = scale * np.mean(g_th, axis=1).sum(axis=0)
    return SemiGradient(d_global, d_local, idx, d_theta, B_eff)


def semi_adapt_thresholds(batch, thresholds, Z_tgt=None, lr=1.0):
    """One SGD step on ``T_n`` for every masked-in datapoint of the batch.

    Uses the first ``S`` proposal draws of each datapoint.  Returns a new
    :class:`LocalThresholds`; masked-out thresholds are copied unchanged.
    """
    Z_tgt = thresholds.Z_tgt if Z_tgt is None else Z_tgt
    mask = np.asarray(batch.mask, dtype=bool)
    T = thresholds.T.copy()
    if mask.any():
        g = G.t_gradient_from_values(batch.a_proposal[mask], Z_tgt)
        T[batch.indices[mask]] -= lr * g
    return LocalThresholds(T, thresholds.Z_tgt, thresholds.epsilon)


def _local_eval_terms(model, theta, z_G, local_proposals, thresholds, rng, M2):
    # acceptance and A at M2 fresh proposal draws per datapoint, for every global draw in z_G
    N = len(thresholds.T)
    mu = np.asarray(local_proposals.mu).reshape(-1)
    ls = np.asarray(local_proposals.log_scale).reshape(-1)
    K = z_G.shape[0]
    z = mu[:, None] + np.exp(ls)[:, None] * rng.standard_normal((K, N, M2))
    log_q = -0.5 * ((z - mu[:, None]) / np.exp(ls)[:, None]) ** 2 - ls[:, None] - 0.5 * math.log(2 * math.pi)
    log_p = model.local_log_joint_batch(z_G, z, None, theta)
    _, _, a, log_a = acceptance_terms(log_p, log_q - thresholds.T[:, None], AcceptanceConfig(0.0, thresholds.epsilon))
    return a, log_p - log_q - log_a


def semi_log_Zr_lower_bound(model, theta, q_global, local_proposals, thresholds, cfg=None, rng=None,
                            chunk=None):
    """Jensen lower bound on ``E_q(z_G) sum_n log Z_{r,n}(z_G)``.

    ``1/M1 sum_m1 sum_n log(1/M2 sum_m2 a_n(z_{n,m1,m2} | z_{G,m1}))``.
    """
    return semi_evaluate(model, theta, q_global, local_proposals, thresholds, cfg, rng, chunk)["log_Zr_lb"]


def semi_evaluate(model, theta, q_global, local_proposals, thresholds, cfg=None, rng=None, chunk=None):
    """Evaluation ELBO of the hybrid family with the Jensen bound standing in for ``log Z_r``.

    ``E_r[A_n]`` is estimated by weighting the same inner proposal draws by
    their acceptance probability.  Returns a dict with ``elbo``,
    ``elbo_per_datapoint`` and ``log_Zr_lb``.
    """
    cfg = SemiEvalConfig() if cfg is None else cfg
    rng = stream(0) if rng is None else rng
    rng = rng if isinstance(rng, np.random.Generator) else stream(rng)
    N = len(thresholds.T)
    if chunk is None:
        chunk = max(1, int(4_000_000 // (N * cfg.M2)))
    lb_sum = glob_sum = a_sum = 0.0
    done = 0
    while done < cfg.M1:
        K = min(chunk, cfg.M1 - done)
        z_G = q_global.sample(rng, K)
        glob_sum += float(np.sum(model.log_prior_global(z_G) - q_global.log_density(z_G)))
        a, A = _local_eval_terms(model, theta, z_G, local_proposals, thresholds, rng, cfg.M2)
        mean_a = np.mean(a, axis=-1)
        lb_sum += float(np.sum(np.log(mean_a)))
        a_sum += float(np.sum(np.sum(a * A, axis=-1) / np.sum(a, axis=-1)))
        done += K
    lb = lb_sum / cfg.M1
    elbo = glob_sum / cfg.M1 + a_sum / cfg.M1 + lb
    return {"elbo": elbo, "elbo_per_datapoint": elbo / N, "log_Zr_lb": lb}


@dataclass
class SemiTrainConfig:
    """Hyperparameters of hybrid training.

    ``S_prime=None`` selects the unbiased sampler; otherwise the biased
    fixed-cost sampler with ``S_prime`` proposals per datapoint.
    """

    total_iters: int = 3000
    batch_size: int = 32
    S: int = 2
    S_prime: int = None
    Z_tgt: float = 0.5
    epsilon: float = 1e-4
    base_lr: float = 1e-2
    local_lr: float = 1e-2
    meanfield_iters: int = 3000
    meanfield_lr: float = 1e-2
    init_T_samples: int = 50
    learn_theta: bool = False
    seed: int = 0
    trace_every: int = 100

    def __post_init__(self):
        if not 0.0 < self.Z_tgt < 1.0:
            raise ValueError("Z_tgt must lie in (0, 1)")
        if self.S < 2:
            raise ValueError("S must be at least 2")
        if self.S_prime is not None and self.S_prime < self.S:
            raise ValueError("S_prime must be at least S")

    @staticmethod
    def rule_of_thumb_S_prime(S, Z_tgt):
        return int(math.ceil(2 * S / Z_tgt))


@dataclass
class SemiResult:
    q_global: MeanFieldNormal
    local_proposals: MeanFieldNormal
    thresholds: LocalThresholds
    theta: np.ndarray
    trace: list = field(default_factory=list)
    meanfield: MeanFieldNormal = None


def split_meanfield(model, q):
    """Split a mean-field fit over ``[z_G, z_1..z_N]`` into global and local proposals."""
    Dg = model.global_dim
    return (MeanFieldNormal(q.mu[:Dg].copy(), q.log_scale[:Dg].copy()),
            MeanFieldNormal(q.mu[Dg:].copy(), q.log_scale[Dg:].copy()))


def initial_thresholds(model, theta, z_G, local_proposals, Z_tgt, epsilon, rng, n_samples=50):
    """``T_n = -(local ELBO estimate)`` at a fixed global value."""
    mu = np.asarray(local_proposals.mu).reshape(-1)
    ls = np.asarray(local_proposals.log_scale).reshape(-1)
    z = mu[:, None] + np.exp(ls)[:, None] * rng.standard_normal((mu.size, n_samples))
    log_q = -0.5 * ((z - mu[:, None]) / np.exp(ls)[:, None]) ** 2 - ls[:, None] - 0.5 * math.log(2 * math.pi)
    elbo_n = np.mean(model.local_log_joint_batch(z_G, z, None, theta) - log_q, axis=-1)
    return LocalThresholds(-elbo_n, Z_tgt, epsilon)


def fit_semi(model, cfg=None, theta=None, init=None):
    """Train the hybrid family.

    Phase 1 fits a mean-field Normal to the joint over global and local
    latents.  Phase 2 alternates mini-batch local sampling, Adam on the
    global proposal, lazy row-wise Adam on the local proposals, and one SGD
    step on the thresholds of the masked-in datapoints.
    """
    cfg = SemiTrainConfig() if cfg is None else cfg
    theta = model.theta.copy() if theta is None else np.asarray(theta, dtype=np.float64)
    N = model.n_data
    B = min(cfg.batch_size, N)
    seed = cfg.seed
    if init is None:
        mf_cfg = TrainConfig(meanfield_iters=cfg.meanfield_iters, meanfield_lr=cfg.meanfield_lr, seed=seed)
        q_full, _ = fit_meanfield(model, theta, cfg=mf_cfg)
    else:
        q_full = init
    q_G, q_loc = split_meanfield(model, q_full)
    thresholds = initial_thresholds(model, theta, q_G.mu, q_loc, cfg.Z_tgt, cfg.epsilon, stream(seed, 8),
                                    cfg.init_T_samples)
    g_vec = q_G.to_vector()
    g_state = AdamState.zeros_like(g_vec, base_lr=cfg.base_lr)
    l_par = np.stack([q_loc.mu, q_loc.log_scale], axis=-1)  # (N, 2)
    l_state = AdamState.zeros_like(l_par, base_lr=cfg.local_lr, rowwise=True)
    if cfg.learn_theta:
        th_state = AdamState.zeros_like(theta, base_lr=cfg.base_lr)
    result = SemiResult(q_G, q_loc, thresholds, theta, meanfield=q_full)
    win_mask, win_A = [], []
    for it in range(cfg.total_iters):
        rng_it = stream(seed, 6, it)
        idx = np.sort(rng_it.choice(N, B, replace=False)) if B < N else np.arange(N)
        z_G, noise = q_G.sample_reparam(rng_it)
        if cfg.S_prime is None:
            batch = semi_sample_unbiased(model, theta, z_G, q_loc, thresholds, idx, cfg.S, (seed, 7, it))
        else:
            batch = semi_sample_biased(model, theta, z_G, q_loc, thresholds, idx, cfg.S, cfg.S_prime,
                                       stream(seed, 7, it))
        batch.eps_G = noise.eps
        win_mask.append(batch.mask_rate)
        # an all-masked batch carries no gradient information; only the trace advances
        if batch.mask.any():
            grad = semi_elbo_gradient(model, theta, q_G, q_loc, batch, N)
            win_A.append(float(np.mean(batch.A[batch.mask])))
            lr_G = lr_schedule(it, cfg.total_iters, cfg.base_lr)
            g_state, g_vec = adam_step(g_state, g_vec, grad.d_global, lr_G)
            q_G = q_G.with_vector(g_vec)
            l_state, l_par = adam_step(l_state, l_par, grad.d_local,
                                       lr_schedule(it, cfg.total_iters, cfg.local_lr), rows=grad.local_rows)
            q_loc = MeanFieldNormal(l_par[:, 0].copy(), l_par[:, 1].copy())
            if cfg.learn_theta and grad.d_theta is not None:
                th_state, theta = adam_step(th_state, theta, grad.d_theta, lr_G)
            thresholds = semi_adapt_thresholds(batch, thresholds)
        if (it + 1) % cfg.trace_every == 0 or it + 1 == cfg.total_iters:
            result.trace.append({"iter": it + 1, "elbo_proxy": float(np.mean(win_A)) if win_A else float("nan"),
                                 "mask_rate": float(np.mean(win_mask)),
                                 "T_median": float(np.median(thresholds.T))})
            win_mask, win_A = [], []
    result.q_global, result.local_proposals, result.thresholds, result.theta = q_G, q_loc, thresholds, theta
    return result


def fit_oracle(model, cfg=None, theta=None):
    """Mean-field fit of the global posterior with the local latents integrated out analytically."""
    cfg = SemiTrainConfig() if cfg is None else cfg
    target = model.marginal_target()
    mf_cfg = TrainConfig(meanfield_iters=cfg.meanfield_iters + cfg.total_iters, meanfield_lr=cfg.meanfield_lr,
                         seed=cfg.seed)
    q, _ = fit_meanfield(target, model.theta if theta is None else theta, cfg=mf_cfg)
    return q


def oracle_elbo(model, q, rng, n_samples=100_000, theta=None):
    """Monte Carlo ELBO of the oracle model under ``q`` (returns total, not per datapoint)."""
    target = model.marginal_target()
    rng = rng if isinstance(rng, np.random.Generator) else stream(rng)
    z = q.sample(rng, n_samples)
    return float(np.mean(target.log_joint(z, theta) - q.log_density(z)))
