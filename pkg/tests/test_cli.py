import csv
import io
import json

import pytest

from eivslope.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def rows(text):
    body = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    return {r[next(iter(r))]: r for r in csv.DictReader(io.StringIO("\n".join(body)))}


def test_estimate_exact_fit(tmp_path, capsys):
    path = tmp_path / "d.csv"
    lines = ["y,x1,x2"] + [f"{2 * i + 1},{i + 0.5},{i - 0.5}" for i in range(8)]
    path.write_text("\n".join(lines) + "\n")
    code, out, _ = run(capsys, "estimate", "--input", str(path), "--estimators", "LS,BR1,MM")
    assert code == 0
    r = rows(out)
    assert float(r["LS"]["slope"]) == pytest.approx(2.0, rel=1e-5)
    assert float(r["LS"]["intercept_raw"]) == pytest.approx(1.0, abs=1e-4)


def test_estimate_fixture_table2(capsys):
    code, out, _ = run(capsys, "estimate", "--fixture", "table2", "--estimators", "LS,BR1,MM")
    assert code == 0
    r = rows(out)
    assert float(r["BR1"]["slope"]) == pytest.approx(0.5905, abs=5e-4)
    assert float(r["BR1"]["intercept_raw"]) == pytest.approx(52.26, abs=0.01)
    assert float(r["MM"]["slope"]) == pytest.approx(-0.289, abs=5e-4)
    assert float(r["MM"]["intercept_raw"]) == pytest.approx(109.35, abs=0.01)
    assert "no-finite-moments" in out


def test_estimate_unknown(capsys):
    code, _, err = run(capsys, "estimate", "--fixture", "table2", "--estimators", "LS,FOO")
    assert code == 2
    assert "unknown estimator 'FOO'" in err


def test_estimate_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "estimate", "--input", str(tmp_path / "none.csv"))
    assert code == 2 and "no such file" in err


def test_usage_error(capsys):
    code, _, _ = run(capsys, "estimate", "--bogus")
    assert code == 2


def test_exact_ls_table4_cell(capsys):
    code, out, _ = run(capsys, "exact", "--n", "100", "--r", "2", "--sigma-xi2", "5", "--estimators", "LS,BR1")
    assert code == 0
    r = rows(out)
    assert 0.81 <= float(r["LS"]["bias"]) <= 0.83
    assert float(r["BR1"]["mse"]) == pytest.approx(0.107, abs=0.005)
    assert "tail bound" in out


def test_exact_window_error(capsys):
    code, _, err = run(capsys, "exact", "--p", "3", "--m", "4", "--lam", "1", "--estimators", "BR1")
    assert code == 2
    assert "ell < (p-2)/2" in err


def test_exact_lambda_zero(capsys):
    code, out, _ = run(capsys, "exact", "--p", "11", "--m", "12", "--lam", "0", "--estimators", "LS,BR2")
    assert code == 0
    r = rows(out)
    assert float(r["LS"]["bias"]) == pytest.approx(5.0)
    assert float(r["BR2"]["bias"]) == pytest.approx(5.0)


def test_verify_hudson(capsys):
    code, out, _ = run(capsys, "verify", "--suite", "hudson", "--format", "json")
    assert code == 0
    report = json.loads(out)
    assert report["passed"] and report["n_failed"] == 0
    assert all(c["passed"] for c in report["checks"])


def test_exact_mse_window(capsys):
    # second moment of BR2 is infinite for p <= 10
    code, _, err = run(capsys, "exact", "--p", "9", "--m", "10", "--lam", "1", "--estimators", "BR2")
    assert code == 2 and "p > 4*deg + 2" in err


def test_verify_injected_failure(capsys):
    code, out, _ = run(capsys, "verify", "--suite", "domination", "--inject-bad-psi")
    assert code == 1
    assert "FAIL" in out


def _config(tmp_path, reps):
    d = dict(
        n=10, r=2, beta=-5.0, tau2=10.0, sigma2=1.0, xi={"sigma_xi2": 0.1}, estimators=["LS", "BR1"], reps=reps, seed=11
    )
    path = tmp_path / "c.json"
    path.write_text(json.dumps(d))
    return str(path)


def test_simulate_byte_identical(tmp_path, capsys, monkeypatch):
    path = _config(tmp_path, 12_000)
    monkeypatch.setenv("EIVSLOPE_WORKERS", "1")
    _, a, _ = run(capsys, "simulate", "--config", path, "--full-precision")
    monkeypatch.setenv("EIVSLOPE_WORKERS", "3")
    _, b, _ = run(capsys, "simulate", "--config", path, "--full-precision")
    assert a == b
    assert "LS" in rows(a)


def test_simulate_one_rep(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "--config", _config(tmp_path, 1))
    assert code == 0
    assert rows(out)["LS"]["se_bias"] == "NA"


def test_simulate_bad_config(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text('{"n": 10}')
    code, _, err = run(capsys, "simulate", "--config", str(path))
    assert code == 2 and "missing" in err


def test_simulate_preset_small(capsys):
    code, out, _ = run(capsys, "simulate", "--preset", "table4", "--reps", "200", "--seed", "5")
    assert code == 0
    body = [ln for ln in out.splitlines() if ln and not ln.startswith("#")]
    header = body[0].split(",")
    assert header[:5] == ["sigma_xi2", "sigma2", "n", "lambda", "estimator"]
    # 12 cells; BR5/TBR5 missing at n=10
    assert len(body) - 1 == 4 * 6 + 8 * 8
