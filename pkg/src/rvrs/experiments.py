"""Experiment drivers used by the command-line interface.

Each driver takes a parsed config dict and returns an :class:`Outcome` with
final metrics, tables to be written as CSV and optional model records.  No
driver touches the file system except through the dataset path it is given.
Replicates run through :func:`run_tasks`, which may fan out to worker
processes; each task derives its own random streams from the run seed so the
results do not depend on the number of workers.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import math

import numpy as np

from . import gradients as G
from .optimize import TRACE_FIELDS, TrainConfig, elbo_meanfield, fit_meanfield, fit_rvrs, fit_vrs
from .oracle import QuadratureGrid, check_gap_bound, quad_summary
from .proposal import FullRankNormal, MeanFieldNormal
from .rng import stream
from .sampler import AcceptanceConfig, acceptance_terms, estimate_Zr, evaluate_elbo, rejection_sample
from .semi import (SemiEvalConfig, SemiTrainConfig, fit_oracle, fit_semi, oracle_elbo, semi_evaluate)
from .target import (AnalyticGaussianTarget, FunnelTarget, HierStudentTModel, LogisticRegressionTarget,
                     load_dataset, make_heavy_tailed_regression, make_synthetic_logistic)

# accepts every proposal (plain variational inference)
NO_REJECTION_T = float("inf")


@dataclass
class Table:
    header: tuple
    rows: list = field(default_factory=list)


@dataclass
class Outcome:
    metrics: dict
    tables: dict = field(default_factory=dict)
    models: list = field(default_factory=list)


def run_tasks(fn, tasks, workers=1):
    """Map ``fn`` over ``tasks`` in order, optionally in worker processes."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


# -- targets and model records -------------------------------------------------

def build_target(desc):
    """Rebuild a target from the JSON-friendly description stored in model records."""
    kind = desc["kind"]
    if kind == "funnel":
        return FunnelTarget()
    if kind == "logistic":
        if desc.get("dataset"):
            X, y = load_dataset(desc["dataset"], task="binary")
        else:
            rng = stream(desc["data_seed"])
            X, y = make_synthetic_logistic(desc["n_data"], desc["dim"], rng, desc["weight_scale"],
                                           desc.get("feature_scale_range"))
        return LogisticRegressionTarget(X, y, standardize=desc.get("standardize", True))
    raise ValueError(f"unknown target kind {kind!r}")


def logistic_desc(cfg, dim=None, data_seed=None):
    rng_lo_hi = cfg.get("feature_scale_range")
    return {"kind": "logistic", "dataset": cfg.get("dataset"), "n_data": cfg["n_data"],
            "dim": cfg["dim"] if dim is None else dim, "weight_scale": cfg["weight_scale"],
            "data_seed": cfg["data_seed"] if data_seed is None else data_seed,
            "feature_scale_range": list(rng_lo_hi) if rng_lo_hi else None,
            "standardize": cfg.get("standardize", True)}


def model_record(name, target_desc, proposal, acceptance):
    family = "fullrank" if isinstance(proposal, FullRankNormal) else "meanfield"
    return {"name": name, "target": target_desc, "family": family, "dim": int(proposal.dim),
            "vector": [float(v) for v in proposal.to_vector()],
            "T": None if math.isinf(acceptance.T) else float(acceptance.T),
            "epsilon": float(acceptance.epsilon)}


def proposal_from_record(rec):
    cls = FullRankNormal if rec["family"] == "fullrank" else MeanFieldNormal
    return cls.from_vector(np.asarray(rec["vector"], dtype=float), rec["dim"])


def _train_config(cfg, Z_tgt, seed):
    return TrainConfig(total_iters=cfg["total_iters"], S=cfg["S"], Z_tgt=Z_tgt, epsilon=cfg["epsilon"],
                       base_lr=cfg["base_lr"], seed=seed, meanfield_iters=cfg["meanfield_iters"],
                       meanfield_lr=cfg["meanfield_lr"], trace_every=cfg["trace_every"],
                       eval_every=cfg.get("eval_every", 0), eval_samples=cfg.get("eval_samples", 20_000),
                       family=cfg.get("family", "meanfield"))


def _trace_table(result):
    t = Table(TRACE_FIELDS)
    for row in result.trace:
        t.rows.append(tuple(row[k] for k in TRACE_FIELDS))
    return t


def _checkpoint_table(result):
    return Table(("iter", "elbo"), [(c["iter"], c["elbo"]) for c in result.checkpoints])


def _tag(z):
    return f"{z:g}"


def _final_elbo(target, proposal, acc, seed, cfg):
    # exact on a grid in one or two dimensions, Monte Carlo otherwise
    if proposal.dim <= 2:
        return quad_summary(target, None, proposal, acc).elbo
    return evaluate_elbo(target, None, proposal, acc, stream(seed, 20), S=cfg["eval_samples"], M=cfg["M"])


# -- funnel ------------------------------------------------------------------------

def _funnel_task(args):
    cfg, Z, seed, q0 = args
    target = FunnelTarget()
    res = fit_rvrs(target, None, _train_config(cfg, Z, seed), init=q0)
    return Z, res


def run_funnel(cfg, seed, workers=1):
    """Mean-field baseline plus one rejection-sampled fit per target acceptance rate on the funnel."""
    target = FunnelTarget()
    base = _train_config(cfg, 0.5, seed)
    q0, mf_trace = fit_meanfield(target, None, cfg=base)
    mf = quad_summary(target, None, q0, AcceptanceConfig(NO_REJECTION_T))
    out = Outcome({"meanfield_elbo": mf.elbo})
    out.tables["meanfield_trace"] = Table(("iter", "elbo"), [(i + 1, e) for i, e in enumerate(mf_trace)])
    out.models.append(model_record("meanfield", {"kind": "funnel"}, q0, AcceptanceConfig(NO_REJECTION_T)))
    results = run_tasks(_funnel_task, [(cfg, Z, seed, q0) for Z in cfg["Z_tgt"]], workers)
    summary = Table(("method", "Z_tgt", "elbo", "Zr", "T", "gm_scale"))
    summary.rows.append(("meanfield", 1.0, mf.elbo, mf.Zr, NO_REJECTION_T, q0.geometric_mean_scale()))
    n, w = cfg["grid_n"], cfg["grid_width"]
    axis = QuadratureGrid.trapezoid(-w, w, n)
    grid = QuadratureGrid.product(axis, axis)
    for Z, res in results:
        q, acc = res.proposal, res.acceptance
        qs = quad_summary(target, None, q, acc)
        tag = _tag(Z)
        summary.rows.append(("rvrs", Z, qs.elbo, qs.Zr, acc.T, q.geometric_mean_scale()))
        out.metrics[f"elbo_Z{tag}"] = qs.elbo
        out.metrics[f"Zr_Z{tag}"] = qs.Zr
        out.metrics[f"T_Z{tag}"] = acc.T
        out.tables[f"trace_Z{tag}"] = _trace_table(res)
        if res.checkpoints:
            out.tables[f"checkpoints_Z{tag}"] = _checkpoint_table(res)
        z = grid.nodes
        log_q = q.log_density(z)
        _, _, a, log_a = acceptance_terms(target.log_joint(z), log_q, acc)
        dens = Table(("x", "y", "log_r", "log_q", "a"))
        log_r = log_q + log_a - qs.log_Zr
        for i in range(z.shape[0]):
            dens.rows.append((z[i, 0], z[i, 1], log_r[i], log_q[i], a[i]))
        out.tables[f"density_Z{tag}"] = dens
        out.models.append(model_record(f"rvrs_Z{tag}", {"kind": "funnel"}, q, acc))
    out.tables["results"] = summary
    return out


# -- gradient variance ---------------------------------------------------------------

def _gradvar_task(args):
    cfg, D, seed = args
    if cfg.get("dataset"):
        X, y = load_dataset(cfg["dataset"], task="binary")
        X = X[:, :D]
    else:
        X, y = make_synthetic_logistic(cfg["n_data"], D, stream(seed, 30, D), cfg["weight_scale"])
    target = LogisticRegressionTarget(X, y)
    tc = TrainConfig(meanfield_iters=cfg["meanfield_iters"], meanfield_lr=cfg["meanfield_lr"], seed=seed)
    q, _ = fit_meanfield(target, None, cfg=tc)
    acc = AcceptanceConfig(-elbo_meanfield(target, None, q, stream(seed, 31, D), 1000), cfg["epsilon"])
    P = q.n_params
    sums = {k: np.zeros(P) for k in ("r1", "r2", "v1", "v2")}
    # shift by the first chunk's means to keep the one-pass variance accurate
    shift_r = shift_v = None
    left, c, n, drawn = cfg["M"], 0, 0, 0
    while left > 0:
        m = min(left, cfg["chunk"])
        b = rejection_sample(target, None, q, acc, stream(seed, 32, D, c), cfg["S"], n_batches=m)
        gr = G.rvrs_phi_gradient(target, None, q, acc, b)
        gv = G.vrs_phi_gradient(q, b)
        if shift_r is None:
            shift_r, shift_v = gr.mean(0), gv.mean(0)
        gr, gv = gr - shift_r, gv - shift_v
        sums["r1"] += gr.sum(0)
        sums["r2"] += (gr**2).sum(0)
        sums["v1"] += gv.sum(0)
        sums["v2"] += (gv**2).sum(0)
        n += m
        drawn += b.total_proposals
        left -= m
        c += 1
    var_r = (sums["r2"] - sums["r1"] ** 2 / n) / (n - 1)
    var_v = (sums["v2"] - sums["v1"] ** 2 / n) / (n - 1)
    ratio = var_v / var_r
    return D, ratio, n * cfg["S"] / drawn


def run_gradvar(cfg, seed, workers=1):
    """Per-coordinate ratio of score-function to pathwise gradient variance across dimensions."""
    results = run_tasks(_gradvar_task, [(cfg, D, seed) for D in cfg["D"]], workers)
    table = Table(("D", "mean_ratio", "scale_ratio", "median_ratio", "min_ratio", "Zr"))
    coords = Table(("D", "coordinate", "ratio"))
    out = Outcome({})
    for D, ratio, zr in results:
        row = (D, float(np.median(ratio[:D])), float(np.median(ratio[D:])), float(np.median(ratio)),
               float(ratio.min()), zr)
        table.rows.append(row)
        for i, r in enumerate(ratio):
            coords.rows.append((D, i, r))
        out.metrics[f"median_ratio_D{D}"] = row[3]
        out.metrics[f"min_ratio_D{D}"] = row[4]
    out.tables["gradvar"] = table
    out.tables["gradvar_coordinates"] = coords
    return out


# -- Z_tgt sweep ------------------------------------------------------------------------

def _sweep_task(args):
    cfg, Z, rep_seed, q0 = args
    target = build_target(logistic_desc(cfg))
    res = fit_rvrs(target, None, _train_config(cfg, Z, rep_seed), init=q0)
    elbo = _final_elbo(target, res.proposal, res.acceptance, rep_seed, cfg)
    zr = estimate_Zr(target, None, res.proposal, res.acceptance, stream(rep_seed, 21), cfg["M"])[0]
    return Z, rep_seed, res, elbo, zr


def run_sweep_z(cfg, seed, workers=1):
    """Train across a grid of target acceptance rates for several replicate seeds."""
    desc = logistic_desc(cfg)
    target = build_target(desc)
    tasks = []
    for k in range(cfg["seeds"]):
        rep_seed = seed * 1000 + k
        q0, _ = fit_meanfield(target, None, cfg=_train_config(cfg, 0.5, rep_seed))
        tasks.extend((cfg, Z, rep_seed, q0) for Z in cfg["Z_tgt"])
    results = run_tasks(_sweep_task, tasks, workers)
    rows = Table(("replicate", "Z_tgt", "elbo", "gm_scale", "T", "Zr_hat"))
    out = Outcome({})
    for Z, rep_seed, res, elbo, zr in results:
        rows.rows.append((rep_seed, Z, elbo, res.proposal.geometric_mean_scale(), res.acceptance.T, zr))
        out.tables[f"trace_rep{rep_seed}_Z{_tag(Z)}"] = _trace_table(res)
        out.models.append(model_record(f"rvrs_rep{rep_seed}_Z{_tag(Z)}", desc, res.proposal, res.acceptance))
    med = Table(("Z_tgt", "elbo", "gm_scale", "T", "Zr_hat"))
    for Z in cfg["Z_tgt"]:
        sel = [r for r in rows.rows if r[1] == Z]
        vals = tuple(float(np.median([r[j] for r in sel])) for j in (2, 3, 4, 5))
        med.rows.append((Z,) + vals)
        for name, v in zip(("elbo", "gm_scale", "T", "Zr_hat"), vals):
            out.metrics[f"median_{name}_Z{_tag(Z)}"] = v
    out.tables["sweep"] = rows
    out.tables["sweep_median"] = med
    return out


# -- logistic regression --------------------------------------------------------------

def _logreg_task(args):
    cfg, method, Z, seed, q0 = args
    target = build_target(logistic_desc(cfg))
    fit = fit_rvrs if method == "rvrs" else fit_vrs
    res = fit(target, None, _train_config(cfg, Z, seed), init=q0)
    elbo = _final_elbo(target, res.proposal, res.acceptance, seed, cfg)
    return method, Z, res, elbo


def run_logreg(cfg, seed, workers=1):
    """Mean-field, pathwise and score-function fits of Bayesian logistic regression."""
    desc = logistic_desc(cfg)
    target = build_target(desc)
    q0, mf_trace = fit_meanfield(target, None, cfg=_train_config(cfg, 0.5, seed))
    no_rej = AcceptanceConfig(NO_REJECTION_T)
    mf_elbo = _final_elbo(target, q0, no_rej, seed, cfg)
    out = Outcome({"meanfield_elbo": mf_elbo, "meanfield_gm_scale": q0.geometric_mean_scale()})
    out.models.append(model_record("meanfield", desc, q0, no_rej))
    res_table = Table(("method", "Z_tgt", "elbo", "gm_scale", "T"))
    res_table.rows.append(("meanfield", 1.0, mf_elbo, q0.geometric_mean_scale(), NO_REJECTION_T))
    tasks = [(cfg, m, Z, seed, q0) for m in cfg["methods"] if m != "meanfield" for Z in cfg["Z_tgt"]]
    for method, Z, res, elbo in run_tasks(_logreg_task, tasks, workers):
        tag = f"{method}_Z{_tag(Z)}"
        res_table.rows.append((method, Z, elbo, res.proposal.geometric_mean_scale(), res.acceptance.T))
        out.metrics[f"elbo_{tag}"] = elbo
        out.tables[f"trace_{tag}"] = _trace_table(res)
        if res.checkpoints:
            out.tables[f"checkpoints_{tag}"] = _checkpoint_table(res)
        out.models.append(model_record(tag, desc, res.proposal, res.acceptance))
    out.tables["results"] = res_table
    out.tables["meanfield_trace"] = Table(("iter", "elbo"), [(i + 1, e) for i, e in enumerate(mf_trace)])
    return out


# -- hierarchical Student-t ----------------------------------------------------------------

def build_semi_model(cfg):
    if cfg.get("dataset"):
        data = np.loadtxt(cfg["dataset"], delimiter="," if str(cfg["dataset"]).endswith(".csv") else None)
        X, y = data[:, :-1], data[:, -1]
    else:
        X, y = make_heavy_tailed_regression(cfg["n_data"], cfg["dim"], stream(cfg["data_seed"]))
    return HierStudentTModel(X, y, nu=cfg["nu"], sigma=cfg["sigma"], prior_scale=cfg["prior_scale"])


def _semi_config(cfg, seed, S_prime):
    return SemiTrainConfig(total_iters=cfg["total_iters"], batch_size=cfg["batch_size"], S=cfg["S"],
                           S_prime=S_prime, Z_tgt=cfg["Z_tgt"], epsilon=cfg["epsilon"], base_lr=cfg["base_lr"],
                           local_lr=cfg["local_lr"], meanfield_iters=cfg["meanfield_iters"],
                           meanfield_lr=cfg["meanfield_lr"], seed=seed, trace_every=cfg["trace_every"])


def _semi_task(args):
    cfg, seed, S_prime, init = args
    model = build_semi_model(cfg)
    res = fit_semi(model, _semi_config(cfg, seed, S_prime), init=init)
    ev = semi_evaluate(model, None, res.q_global, res.local_proposals, res.thresholds,
                       SemiEvalConfig(cfg["M1"], cfg["M2"]), stream(seed, 40))
    mask = float(np.mean([r["mask_rate"] for r in res.trace[len(res.trace) // 2:]]))
    return S_prime, res, ev, mask


def run_semi(cfg, seed, workers=1):
    """Oracle baseline against the hybrid method with the unbiased and biased local samplers."""
    model = build_semi_model(cfg)
    N = model.n_data
    base = _semi_config(cfg, seed, None)
    q_or = fit_oracle(model, base)
    or_elbo = oracle_elbo(model, q_or, stream(seed, 41), cfg["oracle_samples"]) / N
    tc = TrainConfig(meanfield_iters=cfg["meanfield_iters"], meanfield_lr=cfg["meanfield_lr"], seed=seed)
    init, _ = fit_meanfield(model, None, cfg=tc)
    s_primes = [None] + [SemiTrainConfig.rule_of_thumb_S_prime(cfg["S"], cfg["Z_tgt"]) if s == 0 else s
                         for s in cfg["S_prime"]]
    results = run_tasks(_semi_task, [(cfg, seed, sp, init) for sp in s_primes], workers)
    table = Table(("method", "S_prime", "elbo_per_datapoint", "gap_to_oracle", "mask_rate"))
    table.rows.append(("oracle", 0, or_elbo, 0.0, 1.0))
    out = Outcome({"oracle_elbo_per_datapoint": or_elbo})
    unb = None
    for sp, res, ev, mask in results:
        e = ev["elbo_per_datapoint"]
        name = "semi_unbiased" if sp is None else f"semi_biased_S{sp}"
        table.rows.append((name, 0 if sp is None else sp, e, or_elbo - e, mask))
        out.metrics[f"{name}_elbo_per_datapoint"] = e
        out.metrics[f"{name}_mask_rate"] = mask
        tr = Table(("iter", "elbo_proxy", "mask_rate", "T_median"),
                   [(r["iter"], r["elbo_proxy"], r["mask_rate"], r["T_median"]) for r in res.trace])
        out.tables[f"trace_{name}"] = tr
        if sp is None:
            unb = e
        elif unb is not None:
            out.metrics[f"{name}_gap_to_unbiased"] = abs(e - unb)
    out.tables["results"] = table
    return out


# -- bound check ----------------------------------------------------------------------------

def gaussian_bound_instances(n, seed):
    """1-D Normal targets with Normal proposals wide enough for the tail moment to exist."""
    rng = stream(seed, 50)
    out = []
    for _ in range(n):
        s = float(np.exp(rng.uniform(-0.7, 0.7)))
        m = float(rng.normal(0.0, 1.0))
        log_Zp = float(rng.normal(0.0, 1.0))
        # proposal variance above half the posterior variance keeps xi finite
        s_q = s * float(np.exp(rng.uniform(-0.25, 0.6)))
        m_q = m + s * float(rng.normal(0.0, 0.7))
        out.append((AnalyticGaussianTarget.isotropic(log_Zp, m, s, 1), MeanFieldNormal(np.array([m_q]),
                                                                                          np.array([math.log(s_q)]))))
    return out


def run_bound_check(cfg, seed, workers=1):
    """Exact variational gap against the tail-moment bound on random Gaussian instances."""
    table = Table(("instance", "T", "xi", "delta", "bound", "valid", "holds"))
    out = Outcome({})
    all_hold = True
    for i, (target, q) in enumerate(gaussian_bound_instances(cfg["n_instances"], seed)):
        for rep in check_gap_bound(target, q, cfg["T"], epsilon=cfg["epsilon"]):
            table.rows.append((i, rep.T, rep.xi, rep.delta, rep.bound, int(rep.valid), int(rep.holds)))
            all_hold &= rep.holds
    out.metrics["all_hold"] = int(all_hold)
    out.metrics["n_valid_rows"] = sum(r[5] for r in table.rows)
    out.tables["bound_check"] = table
    return out


# -- evaluation of saved models ---------------------------------------------------------------

def run_eval(cfg, seed, workers=1, records=()):
    """Re-evaluate saved models: Monte Carlo ELBO, acceptance rate and (in 1-2 D) the exact ELBO."""
    table = Table(("name", "elbo_mc", "Zr_hat", "elbo_quadrature", "T"))
    out = Outcome({})
    for k, rec in enumerate(records):
        target = build_target(rec["target"])
        q = proposal_from_record(rec)
        acc = AcceptanceConfig(math.inf if rec["T"] is None else rec["T"], rec["epsilon"])
        elbo = evaluate_elbo(target, None, q, acc, stream(seed, 60, k), S=cfg["S"], M=cfg["M"])
        zr = estimate_Zr(target, None, q, acc, stream(seed, 61, k), cfg["M"])[0]
        quad = quad_summary(target, None, q, acc).elbo if q.dim <= 2 else float("nan")
        table.rows.append((rec["name"], elbo, zr, quad, acc.T))
        out.metrics[f"elbo_{rec['name']}"] = elbo
    out.tables["eval"] = table
    return out
