import csv
import json
import subprocess
import sys

import pytest

from rvrs import cli
from rvrs.errors import ConfigError
from rvrs.experiments import Table

FUNNEL_SMALL = """
# tiny run for the test suite
Z_tgt = 0.5
total_iters = 40
meanfield_iters = 50
trace_every = 20
grid_n = 11
"""

SMALL = {
    "funnel": FUNNEL_SMALL,
    "gradvar": "D = 3\nn_data = 20\nmeanfield_iters = 50\nM = 400\nchunk = 150\n",
    "sweep-z": "Z_tgt = 0.4, 0.2\nseeds = 1\ntotal_iters = 30\nmeanfield_iters = 30\ntrace_every = 10\nM = 1000\n"
               "eval_samples = 500\n",
    "logreg": "dim = 3\nn_data = 30\ntotal_iters = 30\nmeanfield_iters = 30\ntrace_every = 10\nM = 1000\n"
              "eval_samples = 500\n",
    "semi": "n_data = 12\nbatch_size = 4\ntotal_iters = 20\nmeanfield_iters = 50\ntrace_every = 10\nM1 = 10\n"
            "M2 = 20\noracle_samples = 500\nS_prime = 0\n",
    "bound-check": "n_instances = 2\nT = -6, -3, 0\n",
}


# -- config parsing -----------------------------------------------------------------------------

def test_defaults_are_filled_in():
    cfg = cli.parse_config("", "funnel")
    assert cfg["Z_tgt"] == [0.5, 0.05] and cfg["S"] == 2


def test_values_and_lists_are_typed():
    cfg = cli.parse_config("Z_tgt = 0.3, 0.1  # two rates\nS = 3\nfamily = fullrank\n", "funnel")
    assert cfg["Z_tgt"] == [0.3, 0.1] and cfg["S"] == 3 and cfg["family"] == "fullrank"
    assert cli.parse_config("standardize = no\n", "logreg")["standardize"] is False


@pytest.mark.parametrize("text", ["bogus = 1\n", "S = two\n", "just words\n", "Z_tgt = 1.5\n", "S = 1\n",
                                  "standardize = maybe\n"])
def test_bad_config_is_rejected(text):
    exp = "logreg" if "standardize" in text else "funnel"
    with pytest.raises(ConfigError):
        cli.parse_config(text, exp)


def test_unknown_experiment():
    with pytest.raises(ConfigError):
        cli.parse_config("", "nope")


def test_eval_requires_run_dir():
    with pytest.raises(ConfigError):
        cli.parse_config("", "eval")


def test_unknown_key_exits_with_code_2(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("not_a_key = 3\n")
    assert cli.main(["funnel", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_missing_dataset_fails_before_compute(tmp_path):
    with pytest.raises(ConfigError):
        cli.run("logreg", f"dataset = {tmp_path / 'missing.csv'}\n", out_dir=str(tmp_path / "o"))


def test_missing_config_file(tmp_path):
    assert cli.main(["funnel", "--config", str(tmp_path / "none.cfg")]) == 2


# -- output format --------------------------------------------------------------------------------

def test_write_table_round_trips_floats(tmp_path):
    x = 0.1 + 0.2
    cli.write_table(tmp_path / "t.csv", Table(("a", "b"), [(1, x), ("s", 1e-300)]))
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["a", "b"]
    assert rows[1] == ["1", "0.30000000000000004"]
    assert float(rows[1][1]) == x and float(rows[2][1]) == 1e-300


# -- experiments ------------------------------------------------------------------------------------

@pytest.mark.parametrize("experiment", sorted(SMALL))
def test_small_runs(tmp_path, experiment):
    summary = cli.run(experiment, SMALL[experiment], seed=1, out_dir=str(tmp_path))
    assert summary["experiment"] == experiment and summary["seed"] == 1
    for name in summary["files"]:
        assert (tmp_path / name).is_file()
    on_disk = json.loads((tmp_path / "summary.json").read_text())
    assert on_disk["metrics"] == summary["metrics"]
    assert summary["metrics"]


def test_bound_check_holds(tmp_path):
    summary = cli.run("bound-check", SMALL["bound-check"], out_dir=str(tmp_path))
    assert summary["metrics"]["all_hold"] == 1


def test_outputs_are_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cli.run("funnel", FUNNEL_SMALL, seed=3, out_dir=str(a))
    cli.run("funnel", FUNNEL_SMALL, seed=3, out_dir=str(b))
    names = sorted(p.name for p in a.glob("*.csv"))
    assert names and names == sorted(p.name for p in b.glob("*.csv"))
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()
    assert (a / "models.json").read_bytes() == (b / "models.json").read_bytes()


def test_worker_count_does_not_change_results(tmp_path):
    text = SMALL["sweep-z"]
    cli.run("sweep-z", text, seed=2, out_dir=str(tmp_path / "one"), workers=1)
    cli.run("sweep-z", text, seed=2, out_dir=str(tmp_path / "two"), workers=2)
    assert (tmp_path / "one" / "sweep.csv").read_bytes() == (tmp_path / "two" / "sweep.csv").read_bytes()


def test_eval_rereads_saved_models(tmp_path):
    cli.run("funnel", FUNNEL_SMALL, out_dir=str(tmp_path / "train"))
    summary = cli.run("eval", f"run_dir = {tmp_path / 'train'}\nS = 200\nM = 2000\n", out_dir=str(tmp_path / "ev"))
    assert set(summary["metrics"]) == {"elbo_meanfield", "elbo_rvrs_Z0.5"}
    rows = list(csv.DictReader(open(tmp_path / "ev" / "eval.csv")))
    for r in rows:
        # Monte Carlo and exact ELBO agree on a 2-D target
        assert abs(float(r["elbo_mc"]) - float(r["elbo_quadrature"])) < 0.1


def test_console_script(tmp_path):
    cfg = tmp_path / "b.cfg"
    cfg.write_text(SMALL["bound-check"])
    proc = subprocess.run([sys.executable, "-m", "rvrs.cli", "bound-check", "--config", str(cfg),
                           "--out", str(tmp_path / "o"), "--seed", "4"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["all_hold"] == 1
