import json
import math
import subprocess
import sys

import pytest
from scipy.special import ndtr

from disaster_polymer import cli
from disaster_polymer.environment import Environment, Window
from disaster_polymer.estimators import ParticleBudgetError

SMALL = ["--n-env", "2", "--n-particles", "400", "--n-paths", "400", "--n-samples", "5000"]

GOLDEN = {
    "sample-env": (["--t", "2"], "time,x1"),
    "estimate-z": (["--t", "2", "--method", "both"], "beta,t,method,value,stderr,log_value,n,censored_count"),
    "free-energy": (["--t", "3,4,5", "--beta", "1"], "beta,t,value,stderr,n,censored_count,rate,rate_stderr"),
    "beta-sweep": (["--t", "3", "--betas", "0,inf"], "beta,t,value,stderr,n,censored_count,rate,rate_stderr"),
    "superadditivity": (["--t", "2", "--s", "2", "--beta", "1"], "beta,s,t,a_s,a_t,a_sum,slack,stderr,bound,holds"),
    "concentration": (["--t", "3", "--beta", "1"], "beta,t,sd,sd_lo,sd_hi,n_env"),
    "stripe-influence": (["--t", "4", "--beta", "1"], "beta,t,r,value,stderr,n,censored_count"),
    "strategy-verify": (
        ["--t", "3"],
        "env,t,n_disasters,n_renewals,log_p_strategy,log_p_strategy_se,log_p_tube,log_p_tube_se,violations",
    ),
    "orderstat-check": (["--k", "2"], "k,pmf_pvalue,gamma_pvalue,renyi_match,independence_pvalue"),
    "dispersion": (["--t", "4"], "beta,t,p,mean_abs_log,zero_count,min_m,n_env"),
    "nonintegrability": (["--m-grid", "10,100"], "m,mean,stderr,exact,modified_mean"),
}


def run(tmp_path, *argv):
    code = cli.main([*argv, "--out", str(tmp_path)])
    return code


@pytest.mark.parametrize("experiment", sorted(GOLDEN))
def test_every_experiment_writes_golden_header(tmp_path, experiment):
    extra, header = GOLDEN[experiment]
    assert run(tmp_path, experiment, *SMALL, *extra, "--threads", "1") == 0
    raw = (tmp_path / "results.csv").read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    assert raw.decode("utf-8").splitlines()[0] == header
    meta = json.loads((tmp_path / "results.json").read_text())
    assert meta["experiment"] == experiment
    assert meta["version"].startswith("v0.1.0")
    assert set(meta) >= {"config", "wall_time_s", "seed", "summary"}


def test_unknown_experiment_exit_code(tmp_path, capsys):
    assert run(tmp_path, "nonsense") == 2
    err = capsys.readouterr().err
    assert all(name in err for name in cli.EXPERIMENTS)


@pytest.mark.parametrize(
    "argv",
    [
        ["free-energy", "--beta", "-1"],
        ["free-energy", "--t", "8,4"],
        ["free-energy", "--n-particles", "1"],
        ["free-energy", "--resampling", "multinomial"],
        ["free-energy", "--seed", "-3"],
    ],
)
def test_invalid_configuration_exit_code(tmp_path, argv):
    assert run(tmp_path, *argv) == 2


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_env": 2, "n-particles": 400, "beta": "1", "t": "3"}))
    out = tmp_path / "a"
    assert cli.main(["free-energy", "--config", str(cfg), "--beta", "2", "--out", str(out), "--threads", "1"]) == 0
    meta = json.loads((out / "results.json").read_text())
    assert meta["config"]["beta"] == "2.0" and meta["config"]["n_env"] == 2 and meta["config"]["t"] == "3.0"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["free-energy", "--config", str(bad), "--out", str(out)]) == 2


def test_budget_exit_code(tmp_path, monkeypatch):
    def broke(*a, **k):
        raise ParticleBudgetError("particle budget insufficient")

    monkeypatch.setattr(cli, "free_energy_curve", broke)
    assert run(tmp_path, "free-energy", "--t", "3") == 3


def test_estimate_z_on_environment_file(tmp_path):
    env = Environment.from_points(Window(4.0, ((-10.0, 10.0),)), [(1.0, 0.0)])
    path = tmp_path / "env.json"
    path.write_text(env.to_json())
    assert run(tmp_path, "estimate-z", "--env-file", str(path), "--t", "2", "--method", "crude", "--n-paths", "200000") == 0
    row = (tmp_path / "results.csv").read_text().splitlines()[1].split(",")
    value, se = float(row[3]), float(row[4])
    exact = 1.0 - (2 * ndtr(0.5) - 1)  # beta = inf by default
    assert abs(value - exact) <= 4 * se
    assert run(tmp_path, "estimate-z", "--env-file", str(path), "--t", "5") == 2


def test_thread_count_does_not_change_output(tmp_path, monkeypatch):
    argv = ["free-energy", "--t", "3,4", "--beta", "1", "--n-env", "6", "--n-particles", "400"]
    assert cli.main([*argv, "--threads", "1", "--out", str(tmp_path / "one")]) == 0
    monkeypatch.setenv("POLYMER_THREADS", "3")
    assert cli.main([*argv, "--out", str(tmp_path / "three")]) == 0
    assert (tmp_path / "one" / "results.csv").read_bytes() == (tmp_path / "three" / "results.csv").read_bytes()


def test_module_entry_point(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "disaster_polymer", "sample-env", "--t", "1", "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert out.returncode == 0
    bad = subprocess.run([sys.executable, "-m", "disaster_polymer", "nope"], capture_output=True, text=True)
    assert bad.returncode == 2


def test_number_formatting():
    assert cli.num(0.1) == "0.1"
    assert cli.num(math.inf) in ("inf", "Infinity")
    assert cli.parse_beta("inf") == math.inf
