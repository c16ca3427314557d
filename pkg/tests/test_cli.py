import csv
import json
import subprocess
import sys

import pytest

from esdelay.cli import apply_override, main, parse_sweep, UsageError
from esdelay.experiments import EXAMPLES


def run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path)])


def test_analyze_example(tmp_path, capsys):
    assert run(tmp_path, "analyze", "--example", "example3_2") == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["feasible"] and report["eps_star"] == pytest.approx(0.315249, rel=2e-5)
    assert report["document"]["tuning"]["epsilon"] == 0.25
    assert "timestamp" not in report
    assert (tmp_path / "report.csv").exists()
    meta = json.loads((tmp_path / "run_meta.json").read_text())
    assert meta["argv"][:3] == ["analyze", "--example", "example3_2"]
    assert "eps*: 0.315" in capsys.readouterr().out


def test_analyze_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "analyze", "--example", "example3_3") == 0
    assert run(b, "analyze", "--example", "example3_3") == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()


def test_analyze_problem_file(tmp_path):
    src = tmp_path / "p.json"
    src.write_text(json.dumps(EXAMPLES["example4_3"]))
    assert run(tmp_path, "analyze", "--problem", str(src)) == 0


def test_gain_violation_exit_code(tmp_path, capsys):
    code = run(tmp_path, "analyze", "--example", "example3_2", "--set", "tuning.k=-0.5")
    assert code == 1
    err = capsys.readouterr().err
    assert "channel 1" in err
    assert (tmp_path / "run_meta.json").exists()


def test_infeasible_epsilon_exit_code(tmp_path):
    assert run(tmp_path, "analyze", "--example", "example3_2", "--set", "tuning.epsilon=0.5") == 1


@pytest.mark.parametrize("args", [
    ["analyze", "--example", "example3_2", "--set", "tuning.gain=1"],
    ["analyze", "--example", "example3_2", "--set", "novalue"],
    ["analyze"],
    ["bogus"],
    ["reproduce", "--table", "9"],
    ["sweep", "--example", "example3_2", "--sweep", "tuning.k:0:1"],
])
def test_usage_errors(tmp_path, args):
    assert run(tmp_path, *args) == 2


def test_verification_failure_exit_code(tmp_path):
    # an infeasible epsilon on the grid: the run cannot be certified
    assert run(tmp_path, "simulate", "--example", "example3_2", "--set", "tuning.epsilon=0.5") == 3


def test_simulate_writes_outputs(tmp_path):
    assert run(tmp_path, "simulate", "--example", "example4_2") == 0
    ver = json.loads((tmp_path / "verification.json").read_text())
    assert ver["envelope_ok"] and ver["published_ok"]
    header = (tmp_path / "trace.csv").read_text().splitlines()[0]
    assert header == "t,theta_hat_1,theta_hat_2,theta_tilde_1,theta_tilde_2,y,D_1,D_2"


def test_reproduce_table(tmp_path):
    assert run(tmp_path, "reproduce", "--table", "5") == 0
    assert (tmp_path / "table5.md").exists() and (tmp_path / "table5.csv").exists()


def test_sweep(tmp_path):
    assert run(tmp_path, "sweep", "--example", "example3_2", "--sweep", "map.kappa:0:0.3:4") == 0
    with open(tmp_path / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert rows[0].keys() >= {"param", "value", "eps_star", "omega_1", "omega_2", "status"}
    eps = [float(r["eps_star"]) for r in rows if r["eps_star"]]
    assert eps == sorted(eps, reverse=True)


def test_override_broadcast_and_matrix():
    doc = json.loads(json.dumps(EXAMPLES["example3_3"]))
    apply_override(doc, "tuning.a=0.2")
    assert doc["tuning"]["a"] == [0.2, 0.2]
    apply_override(doc, "map.h_bar=[[-2,0],[0,-3]]")
    assert doc["map"]["h_bar"] == [[-2, 0], [0, -3]]
    with pytest.raises(UsageError):
        apply_override(doc, "tuning=1")


def test_parse_sweep():
    param, vals = parse_sweep("delays.mu:0:0.01:3")
    assert param == "delays.mu" and list(vals) == [0.0, 0.005, 0.01]


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "esdelay", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip() == "0.1.0"
