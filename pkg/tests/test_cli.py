import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from fellnerschall import __version__
from fellnerschall.cli import ConfigError, main, parse_config

SINE_CONFIG = """
[model]
response = y

[smooth s]
kind = pspline
covariate = x
k = 12
"""

RIDGE_CONFIG = """
[model]
response = y
intercept = false

[smooth g]
kind = randeffect
covariate = g

[emlab]
sigma2 = 1
"""


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def last_diag(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


@pytest.fixture
def sine_files(tmp_path):
    data = tmp_path / "sine.csv"
    assert main(["simulate", "--scenario", "sine-gaussian", "--seed", "1", "--n", "150",
                 "--out", str(data)]) == 0
    cfg = tmp_path / "sine.ini"
    cfg.write_text(SINE_CONFIG)
    return cfg, data


def test_fit_smoke(tmp_path, sine_files):
    cfg, data = sine_files
    out, fitted = tmp_path / "r.json", tmp_path / "f.csv"
    assert main(["fit", "--config", str(cfg), "--data", str(data), "--out", str(out),
                 "--fitted", str(fitted)]) == 0
    rep = json.loads(out.read_text())
    assert rep["converged"]
    assert 2 < rep["edf_total"] < 12
    assert list(rep)[:4] == ["family", "link", "converged", "iterations"]
    rows = read_rows(fitted)
    assert len(rows) == 150
    assert set(rows[0]) == {"row", "fitted", "s", "se"}
    assert all(float(r["se"]) > 0 for r in rows)


def test_fit_reproducible(tmp_path, sine_files):
    cfg, data = sine_files
    reports = []
    for name in ("a.json", "b.json"):
        main(["fit", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / name)])
        rep = json.loads((tmp_path / name).read_text())
        rep.pop("wall_time")
        reports.append(rep)
    assert reports[0] == reports[1]


def test_malformed_config_names_key(tmp_path, sine_files, capsys):
    _, data = sine_files
    cfg = tmp_path / "bad.ini"
    cfg.write_text(SINE_CONFIG + "knots = 7\n")
    assert main(["fit", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "o")]) == 2
    diag = last_diag(capsys)
    assert diag["error"] == "ConfigError"
    assert diag["key"] == "smooth s.knots"


@pytest.mark.parametrize("text,key", [
    ("[model]\nfamily = gaussian\n", "model.response"),
    ("[model]\nresponse = y\nfamily = weibull\n", "model.family"),
    ("[model]\nresponse = y\n[smooth a]\nkind = thinplate\ncovariate = x\n", "smooth a.kind"),
    ("[model]\nresponse = y\n[options]\nstep_control = sometimes\n", "options.step_control"),
])
def test_parse_config_errors(text, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.key == key


def test_poisson_with_negative_response(tmp_path, sine_files, capsys):
    _, data = sine_files
    cfg = tmp_path / "p.ini"
    cfg.write_text(SINE_CONFIG.replace("response = y", "response = y\nfamily = poisson"))
    assert main(["fit", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "o")]) == 3
    assert last_diag(capsys)["error"] == "SupportViolation"


def test_missing_column(tmp_path, sine_files, capsys):
    _, data = sine_files
    cfg = tmp_path / "m.ini"
    cfg.write_text(SINE_CONFIG.replace("covariate = x", "covariate = z"))
    assert main(["fit", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "o")]) == 3
    assert last_diag(capsys)["error"] == "MissingCovariate"


def test_nonconvergence_exit_code(tmp_path, sine_files, capsys):
    _, data = sine_files
    cfg = tmp_path / "n.ini"
    cfg.write_text(SINE_CONFIG + "\n[options]\nmax_iter = 1\nlambda_init = 1e-6\n")
    out = tmp_path / "o.json"
    assert main(["fit", "--config", str(cfg), "--data", str(data), "--out", str(out)]) == 4
    assert not json.loads(out.read_text())["converged"]
    assert last_diag(capsys)["error"] == "MaxIterExceeded"


def test_simulate_byte_identical(tmp_path):
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for p in paths:
        main(["simulate", "--scenario", "survival-cox", "--seed", "42", "--n", "50", "--out", str(p)])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_simulate_unknown_scenario(tmp_path, capsys):
    assert main(["simulate", "--scenario", "nope", "--seed", "1", "--out", str(tmp_path / "x")]) == 2
    assert last_diag(capsys)["error"] == "UnknownScenario"


def test_simulate_bad_seed(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["simulate", "--scenario", "sine-gaussian", "--seed", "-1", "--out", str(tmp_path / "x")])
    assert info.value.code == 2
    assert last_diag(capsys)["error"] == "UsageError"


def test_oneway_without_group_effect_hits_cap(tmp_path):
    # with sigma_b = 0 the REML optimum is at infinity exactly when the between-group
    # mean square falls below the within-group one; seed 1 is such a draw
    data = tmp_path / "ow.csv"
    main(["simulate", "--scenario", "oneway-randeffect", "--seed", "1", "--param", "sigma_b=0",
          "--out", str(data)])
    cfg = tmp_path / "ow.ini"
    cfg.write_text("[model]\nresponse = y\n[smooth g]\nkind = randeffect\ncovariate = group\n")
    out = tmp_path / "ow.json"
    assert main(["fit", "--config", str(cfg), "--data", str(data), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["smoothing_parameters"][0]["value"] == 1e12


def test_emlab_ridge_row(tmp_path):
    data = tmp_path / "r.csv"
    data.write_text("y,g\n1,1\n1,2\n")
    cfg = tmp_path / "r.ini"
    cfg.write_text(RIDGE_CONFIG)
    out = tmp_path / "e.csv"
    assert main(["emlab", "--config", str(cfg), "--data", str(data), "--block", "g",
                 "--out", str(out)]) == 0
    rows = read_rows(out)
    assert len(rows) == 41
    row = min(rows, key=lambda r: abs(np.log(float(r["lambda_prime"]))))
    assert float(row["lambda_prime"]) == pytest.approx(1.0)
    assert float(row["em"]) == pytest.approx(1.333, abs=1e-3)
    assert float(row["acc_em"]) == pytest.approx(1.5616, abs=1e-3)
    assert float(row["fs"]) == pytest.approx(2.0, abs=1e-3)
    for r in rows:
        assert all(np.isfinite(float(v)) for v in r.values())


def test_emlab_ordering_and_curves(tmp_path, sine_files):
    cfg, data = sine_files
    out, curves = tmp_path / "e.csv", tmp_path / "c.csv"
    assert main(["emlab", "--config", str(cfg), "--data", str(data), "--block", "s",
                 "--out", str(out), "--curves", str(curves), "--curves-at", "1e-3"]) == 0
    for r in read_rows(out):
        lp = float(r["lambda_prime"])
        d = [np.log(float(r[k])) - np.log(lp) for k in ("em", "acc_em", "fs")]
        assert np.sign(d[0]) == np.sign(d[1]) == np.sign(d[2])
        assert abs(d[2]) >= abs(d[1]) - 1e-9 and abs(d[1]) >= abs(d[0]) - 1e-9
    assert {"lambda", "b", "em", "acc_em", "fs", "reml"} <= set(read_rows(curves)[0])


def test_emlab_unknown_block(tmp_path, sine_files, capsys):
    cfg, data = sine_files
    assert main(["emlab", "--config", str(cfg), "--data", str(data), "--block", "zz",
                 "--out", str(tmp_path / "o")]) == 2
    assert last_diag(capsys)["key"] == "block"


def test_version_flag():
    res = subprocess.run([sys.executable, "-m", "fellnerschall", "--version"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.strip() == f"fellnerschall {__version__}"
