"""Smoothed rejection sampling from ``r(z) = q(z) a(z) / Z_r``.

The acceptance probability is ``a(z) = eps + (1 - eps) sigmoid(u)`` with
``u = log p(x, z) - log q(z) + T``.  ``a_raw`` always denotes the unguarded
``sigmoid(u)``.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.special import expit, log_expit

from ._validation import check_positive_int
from .errors import BudgetExhaustedError
from .rng import as_generator

_MAX_CHUNK = 1 << 16


@dataclass(frozen=True)
class AcceptanceConfig:
    """Threshold ``T`` and guard floor ``epsilon`` of the acceptance probability.

    ``T = +inf`` accepts every proposal (plain variational inference).
    """

    T: float
    epsilon: float = 0.0

    def __post_init__(self):
        T = float(self.T)
        eps = float(self.epsilon)
        if math.isnan(T) or T == -math.inf:
            raise ValueError("T must be finite or +inf")
        if not 0.0 <= eps < 1.0:
            raise ValueError(f"epsilon must lie in [0, 1), got {eps}")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "epsilon", eps)

    @property
    def zeta(self):
        return self.epsilon / (1.0 - self.epsilon)

    def with_T(self, T):
        return AcceptanceConfig(T, self.epsilon)


def acceptance_terms(log_p, log_q, cfg):
    """Return ``(u, a_raw, a, log_a)`` for log densities evaluated at the same points.

    ``log_a`` stays accurate when ``u`` is very negative: for ``epsilon = 0``
    it is ``-softplus(-u)``, otherwise a two-term log-sum-exp.
    """
    u = np.asarray(log_p) - np.asarray(log_q) + cfg.T
    a_raw = expit(u)
    if cfg.epsilon == 0.0:
        return u, a_raw, a_raw, log_expit(u)
    eps = cfg.epsilon
    a = eps + (1.0 - eps) * a_raw
    log_a = np.logaddexp(math.log(eps), math.log1p(-eps) + log_expit(u))
    return u, a_raw, a, log_a


def accept_prob(target, theta, proposal, cfg, z):
    """Return ``(a_raw, a)`` at the points ``z``."""
    log_p = target.log_joint(z, theta)
    log_q = proposal.log_density(z)
    _, a_raw, a, _ = acceptance_terms(log_p, log_q, cfg)
    return a_raw, a


@dataclass
class AcceptedBatch:
    """Accepted samples plus everything the gradient estimators need.

    Arrays have shape ``batch_shape + (S,)`` (``+ (D,)`` for ``z`` and ``eps``);
    ``batch_shape`` is empty for a single batch.  ``a_proposal`` holds the
    guarded acceptance of the first ``S`` proposal draws of each batch, which
    are plain draws from ``q`` regardless of the accept/reject outcome.
    """

    z: np.ndarray
    eps: np.ndarray
    log_p: np.ndarray
    log_q: np.ndarray
    a_raw: np.ndarray
    a: np.ndarray
    A: np.ndarray
    proposals_used: np.ndarray
    a_proposal: np.ndarray
    cfg: AcceptanceConfig
    theta: np.ndarray = None
    total_proposals: int = field(default=0)

    @property
    def S(self):
        return self.z.shape[-2]

    def permuted(self, order):
        """Copy with samples reordered along the sample axis."""
        take = lambda x: np.take(x, order, axis=-1)
        take_z = lambda x: np.take(x, order, axis=-2)
        return AcceptedBatch(take_z(self.z), take_z(self.eps), take(self.log_p), take(self.log_q),
                             take(self.a_raw), take(self.a), take(self.A), take(self.proposals_used),
                             self.a_proposal, self.cfg, self.theta, self.total_proposals)


def next_chunk(needed, drawn, accepted, remaining):
    """Number of proposals to draw next while ``needed`` acceptances are outstanding."""
    if drawn == 0:
        chunk = needed
    else:
        rate = max(accepted, 0.5) / drawn
        chunk = math.ceil(1.2 * needed / rate)
    return int(max(1, min(max(chunk, needed), _MAX_CHUNK, remaining)))


def draw_accepted(log_target, proposal, cfg, rng, n_accept, max_proposals):
    """Core loop of the rejection sampler.

    ``log_target(z)`` returns the unnormalized log density.  Returns a dict of
    accepted arrays (in acceptance order), per-sample draw counts, the guarded
    acceptance of the first ``n_accept`` proposals and the total draw count.
    """
    parts = {k: [] for k in ("z", "eps", "log_p", "log_q", "u", "a_raw", "a", "log_a", "pos")}
    head = []
    drawn = accepted = 0
    while accepted < n_accept:
        remaining = max_proposals - drawn
        if remaining <= 0:
            raise BudgetExhaustedError(
                f"drew {drawn} proposals but accepted only {accepted} of {n_accept}; "
                "the threshold T is probably far too low",
                proposals_drawn=drawn, accepted=accepted)
        chunk = next_chunk(n_accept - accepted, drawn, accepted, remaining)
        z, noise = proposal.sample_reparam(rng, (chunk,))
        unif = rng.random(chunk)
        log_p = log_target(z)
        log_q = proposal.log_density(z)
        u, a_raw, a, log_a = acceptance_terms(log_p, log_q, cfg)
        if len(head) < n_accept:
            head.extend(a[: n_accept - len(head)].tolist())
        keep = np.flatnonzero(unif < a)[: n_accept - accepted]
        for key, val in (("z", z), ("eps", noise.eps), ("log_p", log_p), ("log_q", log_q), ("u", u),
                         ("a_raw", a_raw), ("a", a), ("log_a", log_a)):
            parts[key].append(val[keep])
        parts["pos"].append(keep + drawn)
        accepted += keep.size
        drawn += chunk
    out = {k: np.concatenate(v) for k, v in parts.items()}
    pos = out.pop("pos")
    out["proposals_used"] = np.diff(pos, prepend=-1)
    out["a_head"] = np.array(head)
    out["drawn"] = drawn
    return out


def rejection_sample(target, theta, proposal, cfg, rng, S, max_proposals=None, n_batches=None):
    """Draw ``S`` accepted samples from ``r`` (or ``n_batches`` independent batches of ``S``).

    Accepted samples are i.i.d. from ``r``, so ``n_batches`` batches are drawn
    as one run of ``n_batches * S`` acceptances split in order.

    Raises
    ------
    BudgetExhaustedError
        If more than ``max_proposals`` (default ``10**6 * S`` per batch)
        proposals are needed.
    """
    S = check_positive_int(S, "S")
    rng = as_generator(rng)
    n_total = S if n_batches is None else S * check_positive_int(n_batches, "n_batches")
    if max_proposals is None:
        max_proposals = 10**6 * n_total
    if max_proposals < n_total:
        raise ValueError("max_proposals must be at least the number of requested samples")
    raw = draw_accepted(lambda z: target.log_joint(z, theta), proposal, cfg, rng, n_total, max_proposals)
    shape = (S,) if n_batches is None else (n_batches, S)
    d = proposal.dim

    def fold(x, trailing=()):
        return x.reshape(shape + trailing)

    A = raw["log_p"] - raw["log_q"] - raw["log_a"]
    return AcceptedBatch(
        z=fold(raw["z"], (d,)), eps=fold(raw["eps"], (d,)), log_p=fold(raw["log_p"]),
        log_q=fold(raw["log_q"]), a_raw=fold(raw["a_raw"]), a=fold(raw["a"]), A=fold(A),
        proposals_used=fold(raw["proposals_used"]), a_proposal=fold(raw["a_head"]), cfg=cfg,
        theta=None if theta is None else np.asarray(theta), total_proposals=raw["drawn"])


def proposal_acceptance(target, theta, proposal, cfg, rng, M, chunk=_MAX_CHUNK):
    """Guarded acceptance ``a`` at ``M`` fresh proposal draws."""
    rng = as_generator(rng)
    out = []
    left = M
    while left > 0:
        n = min(left, chunk)
        z = proposal.sample(rng, n)
        out.append(acceptance_terms(target.log_joint(z, theta), proposal.log_density(z), cfg)[2])
        left -= n
    return np.concatenate(out)


def estimate_Zr(target, theta, proposal, cfg, rng, M=100_000):
    """Monte Carlo mean acceptance over ``M`` proposal draws and its standard error."""
    M = check_positive_int(M, "M", minimum=2)
    a = proposal_acceptance(target, theta, proposal, cfg, rng, M)
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(M))


def estimate_log_Zr(target, theta, proposal, cfg, rng, M=100_000):
    """Log of the Monte Carlo mean acceptance (consistent, biased low)."""
    return math.log(estimate_Zr(target, theta, proposal, cfg, rng, M)[0])


def elbo_estimate(batch, log_Zr):
    """Plug-in ELBO: mean of ``A`` over the batch plus ``log Z_r``."""
    if batch.A.size == 0:
        raise ValueError("empty batch")
    return float(np.mean(batch.A) + log_Zr)


def evaluate_elbo(target, theta, proposal, cfg, rng, S=20_000, M=100_000):
    """ELBO of ``r`` from ``S`` accepted samples and an ``M``-draw ``log Z_r`` estimate."""
    rng = as_generator(rng)
    batch = rejection_sample(target, theta, proposal, cfg, rng, S)
    return elbo_estimate(batch, estimate_log_Zr(target, theta, proposal, cfg, rng, M))
