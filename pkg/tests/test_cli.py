import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from creste import DgpSpec, Schema, simulate_sample, write_csv
from creste.cli import ESTIMATE_FIELDS, main
from creste.config import RunConfig, build_config, parse_config_text
from creste.simulation import METRIC_FIELDS


def run(args, capsys=None):
    out = io.StringIO()
    code = main([str(a) for a in args], stdout=out)
    return code, out.getvalue()


def read_report(path):
    lines = [ln for ln in open(path, encoding="utf-8") if not ln.startswith("#")]
    return list(csv.DictReader(lines))


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "data.csv"
    write_csv(simulate_sample(DgpSpec(n=400, seed=21)).frame, path)
    return path


@pytest.fixture(scope="module")
def perfect_csv(tmp_path_factory):
    rng = np.random.default_rng(4)
    n = 300
    x = rng.uniform(size=n)
    v = rng.integers(0, 2, n).astype(float)
    y = 1 + 0.6 * v - x + rng.normal(size=n)
    path = tmp_path_factory.mktemp("cli") / "perfect.csv"
    from creste import ObservationFrame
    write_csv(ObservationFrame(y, v, v, x_cont=x, cont_names=("x1",)), path, Schema("y", "d", "v", ("x1",)))
    return path


BASE = ["--continuous", "x1", "--discrete", "x2"]


def test_two_levels_two_rows(data_csv, tmp_path):
    out = tmp_path / "r.csv"
    code, _ = run(["estimate", "--input", data_csv, *BASE, "--alphas", "0.25,0.5", "--B", 10, "--output", out])
    assert code == 0
    rows = read_report(out)
    assert [r["alpha"] for r in rows] == ["0.25", "0.5"]
    assert list(rows[0]) == list(ESTIMATE_FIELDS)
    r = rows[0]
    assert float(r["se_gamma1"]) > 0
    assert float(r["ci_gamma1_lower"]) < float(r["gamma1"]) < float(r["ci_gamma1_upper"])
    assert 0 < float(r["complier_share"]) < 1
    assert float(r["sigma1"]) in RunConfig().grid and int(r["truncated_count"]) >= 0


def test_perfect_compliance_proposed_equals_naive(perfect_csv, tmp_path):
    common = ["estimate", "--input", perfect_csv, "--continuous", "x1", "--B", 0]
    run([*common, "--weight-mode", "proposed", "--output", tmp_path / "p.csv"])
    run([*common, "--weight-mode", "naive", "--output", tmp_path / "n.csv"])
    p, nv = read_report(tmp_path / "p.csv")[0], read_report(tmp_path / "n.csv")[0]
    assert abs(float(p["beta1"]) - float(nv["beta1"])) <= 1e-6
    assert abs(float(p["gamma1"]) - float(nv["gamma1"])) <= 1e-6
    assert float(p["complier_share"]) == 1.0


def test_missing_treatment_column(data_csv, capsys):
    code, _ = run(["estimate", "--input", data_csv, "--treatment", "treat"])
    err = capsys.readouterr().err.strip()
    assert code == 3
    assert err == "error[data]: missing column 'treat'"
    assert "\n" not in err


def test_config_error_exit_code(data_csv, capsys):
    assert run(["estimate", "--input", data_csv, "--alphas", "0,0.5"])[0] == 2
    assert capsys.readouterr().err.startswith("error[config]:")
    assert run(["estimate", "--input", data_csv, "--kernel-order-pi", "3"])[0] == 2
    assert run(["estimate", "--input", data_csv, "--B", "many"])[0] == 2
    assert run(["estimate", "--bogus", "1"])[0] == 2
    assert run(["estimate"])[0] == 2


def test_numerical_error_exit_code(tmp_path, capsys):
    path = tmp_path / "flat.csv"
    rows = ["y,d,v,c"] + [f"{i * 0.37 % 1:.3f},{i % 2},{(i // 2) % 2},1.0" for i in range(40)]
    path.write_text("\n".join(rows) + "\n")
    code, _ = run(["estimate", "--input", path, "--continuous", "c", "--weight-mode", "naive", "--B", 0])
    assert code == 4
    assert "'c'" in capsys.readouterr().err


def test_config_file_and_precedence(data_csv, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# comment\ninput = {data_csv}\ncontinuous = x1\ndiscrete = x2\nalphas = 0.2, 0.4\nB = 0\n")
    code, out = run(["estimate", "--config", cfg, "--alphas", "0.3"])
    assert code == 0
    body = [ln for ln in out.splitlines() if not ln.startswith("#")]
    assert len(body) == 2 and body[1].startswith("0.3,")


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("alphas = 0.3\nbandwidth = 2\n")
    assert run(["estimate", "--config", cfg])[0] == 2
    assert "line 2" in capsys.readouterr().err


def test_report_round_trip(data_csv, tmp_path):
    first = tmp_path / "first.csv"
    run(["estimate", "--input", data_csv, *BASE, "--alphas", "0.3", "--B", 5, "--seed", 7, "--output", first])
    second = tmp_path / "second.csv"
    assert run(["estimate", "--config", first, "--output", second])[0] == 0

    def strip(p):
        return [ln for ln in open(p) if not ln.startswith("#@ output")]

    assert strip(first) == strip(second)
    assert open(first).readline().startswith("# creste ")


def test_json_report_and_round_trip(data_csv, tmp_path):
    out = tmp_path / "r.json"
    run(["estimate", "--input", data_csv, *BASE, "--B", 4, "--format", "json", "--output", out])
    doc = json.loads(out.read_text())
    assert doc["version"] and doc["config"]["alphas"] == [0.3]
    est = doc["estimates"][0]
    assert est["coefficients"]["names"][0] == "treatment" and len(est["coefficients"]["se_gamma"]) == 4
    again = tmp_path / "again.json"
    run(["estimate", "--config", out, "--output", again])
    d2 = json.loads(again.read_text())
    assert d2["estimates"] == doc["estimates"]


def test_upper_tail_key(data_csv):
    code, out = run(["estimate", "--input", data_csv, *BASE, "--tail", "upper", "--alphas", "0.7", "--B", 0])
    assert code == 0 and ",upper," in out


def test_simulate_smoke_and_determinism(tmp_path):
    args = ["simulate", "--n", 100, "--R", 2, "--B", 2, "--alphas", "0.3", "--seed", 3]
    a = tmp_path / "a.csv"
    code, table = run([*args, "--output", a])
    assert code == 0 and "Cov 95" in table
    first = a.read_bytes()
    run([*args, "--output", a])
    assert a.read_bytes() == first
    rows = read_report(a)
    assert list(rows[0]) == list(METRIC_FIELDS)
    assert len(rows) == 2 * 3


def test_simulate_table_file_and_threads(tmp_path):
    t = tmp_path / "t.txt"
    code, out = run(["simulate", "--n", 80, "--R", 2, "--B", 2, "--estimators", "naive", "--threads", 2,
                     "--table", t])
    assert code == 0 and out.startswith("# creste")
    assert "naive:beta1" in t.read_text()


def test_mode_mismatch_rejected(tmp_path):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("mode = simulate\nR = 2\n")
    assert run(["estimate", "--config", cfg])[0] == 2


def test_oracle_not_available_for_estimate(data_csv):
    assert run(["estimate", "--input", data_csv, "--weight-mode", "oracle"])[0] == 2


def test_config_text_round_trip():
    cfg = build_config("simulate", overrides={"alphas": (0.1, 0.25), "sigma1": 0.3, "standardize": True})
    again = build_config("simulate", parse_config_text(cfg.to_text()))
    assert again == cfg


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "creste", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("creste ")
