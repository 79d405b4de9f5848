"""Command-line entry point: ``rvrs <experiment> --config <file> [--seed N] [--out DIR] [--workers K]``.

Config files are flat ``key = value`` text; ``#`` starts a comment.  Lists
are comma separated.  Every experiment has a fixed set of keys (see
:data:`SCHEMAS`); unknown keys are an error.  Outputs land in the output
directory as CSV tables (17 significant digits), ``summary.json`` and, for
training experiments, ``models.json``.
"""

import argparse
import csv
import json
import os
from pathlib import Path
import sys
import time

from .errors import ConfigError
from . import experiments as E

_INT, _FLOAT, _STR, _BOOL, _PATH = "int", "float", "str", "bool", "path"
_INTS, _FLOATS = "int_list", "float_list"

_TRAIN = {
    "total_iters": (_INT, 5000), "meanfield_iters": (_INT, 3000), "base_lr": (_FLOAT, 1e-2),
    "meanfield_lr": (_FLOAT, 1e-2), "S": (_INT, 2), "epsilon": (_FLOAT, 1e-4), "trace_every": (_INT, 100),
    "eval_every": (_INT, 0), "eval_samples": (_INT, 20_000), "family": (_STR, "meanfield"),
}
_LOGISTIC_DATA = {
    "dataset": (_PATH, None), "n_data": (_INT, 100), "dim": (_INT, 2), "weight_scale": (_FLOAT, 1.0),
    "data_seed": (_INT, 0), "feature_scale_range": (_FLOATS, None), "standardize": (_BOOL, True),
}

SCHEMAS = {
    "funnel": {**_TRAIN, "Z_tgt": (_FLOATS, [0.5, 0.05]), "grid_n": (_INT, 201), "grid_width": (_FLOAT, 6.0)},
    "gradvar": {"D": (_INTS, [10, 30, 60]), "n_data": (_INT, 100), "weight_scale": (_FLOAT, 1.0),
                "meanfield_iters": (_INT, 1000), "meanfield_lr": (_FLOAT, 1e-2), "M": (_INT, 500_000),
                "S": (_INT, 2), "epsilon": (_FLOAT, 1e-4), "chunk": (_INT, 50_000), "dataset": (_PATH, None)},
    "sweep-z": {**_TRAIN, **_LOGISTIC_DATA, "total_iters": (_INT, 4000), "n_data": (_INT, 20),
                "weight_scale": (_FLOAT, 5.0), "Z_tgt": (_FLOATS, [0.4, 0.2, 0.1, 0.05]), "seeds": (_INT, 3),
                "M": (_INT, 100_000)},
    "logreg": {**_TRAIN, **_LOGISTIC_DATA, "dim": (_INT, 51), "Z_tgt": (_FLOATS, [0.3]),
               "methods": (_STR + "_list", ["meanfield", "rvrs", "vrs"]), "M": (_INT, 100_000)},
    "semi": {"n_data": (_INT, 128), "dim": (_INT, 2), "data_seed": (_INT, 0), "dataset": (_PATH, None),
             "nu": (_FLOAT, 4.0), "sigma": (_FLOAT, 1.0), "prior_scale": (_FLOAT, 1.0), "Z_tgt": (_FLOAT, 0.5),
             "S": (_INT, 2), "S_prime": (_INTS, [0]), "batch_size": (_INT, 32), "total_iters": (_INT, 2000),
             "meanfield_iters": (_INT, 3000), "base_lr": (_FLOAT, 1e-2), "local_lr": (_FLOAT, 1e-2),
             "meanfield_lr": (_FLOAT, 1e-2), "epsilon": (_FLOAT, 1e-4), "M1": (_INT, 200), "M2": (_INT, 300),
             "oracle_samples": (_INT, 100_000), "trace_every": (_INT, 100)},
    "bound-check": {"n_instances": (_INT, 20), "T": (_FLOATS, [-8.0, -7.0, -6.0, -5.0, -4.0, -3.0, -2.0, -1.0, 0.0]),
                    "epsilon": (_FLOAT, 0.0)},
    "eval": {"run_dir": (_PATH, None), "S": (_INT, 20_000), "M": (_INT, 100_000)},
}

DRIVERS = {
    "funnel": E.run_funnel, "gradvar": E.run_gradvar, "sweep-z": E.run_sweep_z, "logreg": E.run_logreg,
    "semi": E.run_semi, "bound-check": E.run_bound_check, "eval": E.run_eval,
}

_SCALAR_PARSERS = {_INT: int, _FLOAT: float, _STR: str, _PATH: str}


def _parse_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(kind, text):
    if text.lower() in ("none", ""):
        return None
    if kind == _BOOL:
        return _parse_bool(text)
    if kind.endswith("_list"):
        base = _SCALAR_PARSERS[kind[: -len("_list")]]
        return [base(part.strip()) for part in text.split(",") if part.strip()]
    return _SCALAR_PARSERS[kind](text)


def parse_config(text, experiment):
    """Parse flat ``key = value`` text into a complete config dict with defaults filled in.

    Raises
    ------
    ConfigError
        On an unknown experiment, unknown key, malformed line or bad value.
    """
    if experiment not in SCHEMAS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {sorted(SCHEMAS)}")
    schema = SCHEMAS[experiment]
    cfg = {k: v for k, (_, v) in schema.items()}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown key {key!r} for experiment {experiment!r}")
        try:
            cfg[key] = _parse_value(schema[key][0], value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    _check_values(cfg, experiment)
    return cfg


def _check_values(cfg, experiment):
    for key in ("Z_tgt",):
        vals = cfg.get(key)
        vals = vals if isinstance(vals, list) else [vals] if vals is not None else []
        if any(not 0.0 < v < 1.0 for v in vals):
            raise ConfigError("Z_tgt values must lie in (0, 1)")
    if cfg.get("S") is not None and cfg["S"] < 2:
        raise ConfigError("S must be at least 2")
    if experiment == "eval" and not cfg.get("run_dir"):
        raise ConfigError("eval needs run_dir")
    if cfg.get("feature_scale_range") is not None and len(cfg["feature_scale_range"]) != 2:
        raise ConfigError("feature_scale_range takes two numbers: lo, hi")


def validate_paths(cfg, out_dir):
    """Check every input path exists and the output directory is writable, before any compute."""
    for key in ("dataset", "run_dir"):
        p = cfg.get(key)
        if p is not None and not Path(p).exists():
            raise ConfigError(f"{key} does not exist: {p}")
    if cfg.get("run_dir") and not (Path(cfg["run_dir"]) / "models.json").is_file():
        raise ConfigError(f"no models.json in {cfg['run_dir']}")
    out = Path(out_dir)
    probe = out
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir() or not os.access(probe, os.W_OK):
        raise ConfigError(f"output directory is not writable: {out_dir}")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_table(path, table):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.header)
        for row in table.rows:
            w.writerow([_fmt(v) for v in row])


def write_outputs(out_dir, experiment, cfg, seed, outcome, wall_time):
    """Write tables, ``results.csv`` with every metric, models and the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, table in outcome.tables.items():
        write_table(out / f"{name}.csv", table)
        files.append(f"{name}.csv")
    metrics = E.Table(("metric", "value"), sorted(outcome.metrics.items()))
    write_table(out / "metrics.csv", metrics)
    files.append("metrics.csv")
    if outcome.models:
        (out / "models.json").write_text(json.dumps(outcome.models, indent=1))
        files.append("models.json")
    summary = {"experiment": experiment, "seed": seed, "config": cfg,
               "metrics": {k: float(_fmt(v)) if isinstance(v, float) else v for k, v in outcome.metrics.items()},
               "files": sorted(files), "wall_time": wall_time}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def run(experiment, config_text, seed=0, out_dir=None, workers=1):
    """Programmatic equivalent of the command line; returns the summary dict."""
    cfg = parse_config(config_text, experiment)
    out_dir = out_dir or f"runs/{experiment}-seed{seed}"
    validate_paths(cfg, out_dir)
    t0 = time.perf_counter()
    if experiment == "eval":
        records = json.loads((Path(cfg["run_dir"]) / "models.json").read_text())
        outcome = E.run_eval(cfg, seed, workers, records)
    else:
        outcome = DRIVERS[experiment](cfg, seed, workers)
    return write_outputs(out_dir, experiment, cfg, seed, outcome, time.perf_counter() - t0)


def build_parser():
    p = argparse.ArgumentParser(prog="rvrs", description="Rejection-sampled variational inference experiments.")
    p.add_argument("experiment", choices=sorted(SCHEMAS))
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output directory (default runs/<experiment>-seed<N>)")
    p.add_argument("--workers", type=int, default=1, help="worker processes for independent replicates")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        print(f"rvrs: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        summary = run(args.experiment, text, args.seed, args.out, max(1, args.workers))
    except ConfigError as exc:
        print(f"rvrs: config error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary["metrics"], indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
