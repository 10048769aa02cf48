"""Driver-level tests: every subcommand exercised in-process through main().

No subprocesses -- argparse, the handlers and the report serialization are
all importable -- so the assertions can freeze exit codes, whole documents
and CSV bytes.
"""
import json
import math

import numpy as np
import pytest

from qsdlab.cli import main
from qsdlab.model import CONVENTION_NOTE, reduce_unit_diffusion
from qsdlab.zoo import zoo_build

LOGISTIC = ["--param", "mu=1", "--param", "c=1", "--param", "sigma=1"]


def run_cli(capsys, argv):
    rc = main(argv)
    out = capsys.readouterr().out
    return rc, (json.loads(out) if out else None)


# ------------------------------------------------------------- listing

def test_zoo_lists_model_families(capsys):
    rc, doc = run_cli(capsys, ["zoo"])
    assert rc == 0
    assert sorted(doc["models"]) == ["bessel", "generalized_feller",
                                     "logistic_N", "logistic_X_killed",
                                     "perturbed_bessel", "population_N"]
    for entry in doc["models"].values():
        assert entry["doc"]
        assert isinstance(entry["params"], dict)


# ------------------------------------------------------------- classify

def test_classify_report(capsys):
    rc, doc = run_cli(capsys, ["classify", "--zoo", "bessel",
                               "--param", "nu=-1.5"])
    assert rc == 0
    cls = doc["classification"]
    assert cls["left"]["kind"] == "Exit"
    assert cls["right"]["kind"] == "Natural"
    assert cls["absorption_certain"] is True
    assert doc["convention"] == CONVENTION_NOTE
    assert doc["settings"]["tol"] == 1e-9
    assert doc["model"]["params"] == {"nu": -1.5}
    assert doc["model"]["domain"] == [0.0, "inf"]
    assert doc["reduced"] is False


def test_classify_reduces_first(capsys):
    rc, doc = run_cli(capsys, ["classify", "--zoo", "population_N",
                               "--param", "mu=1", "--param", "c=1",
                               "--param", "sigma=1", "--param", "gamma=1"])
    assert rc == 0
    assert doc["reduced"] is True
    # the reduced domain reaches infinity; the report must still be JSON
    assert doc["reduced_domain"] == [0.0, "inf"]
    assert doc["classification"]["left"]["kind"] == "Exit"
    assert doc["classification"]["right"]["kind"] == "Entrance"


def test_classify_custom_model_from_file(tmp_path, capsys):
    path = tmp_path / "ou.json"
    path.write_text(json.dumps({"name": "custom", "drift_expr": "-x",
                                "domain": ["-inf", "inf"], "x_ref": 0.0}))
    rc, doc = run_cli(capsys, ["classify", "--model-json", str(path)])
    assert rc == 0
    assert doc["model"]["name"] == "custom"
    assert doc["model"]["killed"] is False
    assert doc["classification"]["left"]["kind"] == "Natural"
    assert doc["classification"]["right"]["kind"] == "Natural"
    assert doc["classification"]["absorption_certain"] is None


# ------------------------------------------------------------- spectrum

def test_spectrum_auto_uses_schrodinger_on_the_line(capsys):
    rc, doc = run_cli(capsys, ["spectrum", "--zoo", "logistic_X_killed",
                               *LOGISTIC, "--grid-size", "3000"])
    assert rc == 0
    assert doc["settings"]["method"] == "schrodinger"
    ev = doc["spectrum"]["eigenvalues"]
    assert len(ev) == 2                       # default k on the full line
    assert ev[0] == pytest.approx(1.3785477, rel=1e-6)
    assert doc["gap"] == pytest.approx(1.8976, rel=1e-3)


def test_spectrum_shoot_with_oracle_crosscheck(capsys):
    rc, doc = run_cli(capsys, ["spectrum", "--zoo", "perturbed_bessel",
                               "--param", "nu=-1", "--param", "c0=0.5",
                               "--param", "c1=0.5", "--oracle"])
    assert rc == 0
    assert doc["settings"]["method"] == "shoot"
    lam0 = doc["spectrum"]["eigenvalues"][0]
    assert lam0 == pytest.approx(1.7408585, rel=1e-5)
    assert doc["oracle"]["agrees_rel"] is True
    assert doc["oracle"]["max_difference"] <= 1e-4 * (1.0 + lam0)


def test_spectrum_k2_arithmetic_progression(capsys):
    rc, doc = run_cli(capsys, ["spectrum", "--zoo", "perturbed_bessel",
                               "--param", "nu=-1.5", "--param", "c1=1",
                               "--k", "2"])
    assert rc == 0
    np.testing.assert_allclose(doc["spectrum"]["eigenvalues"], [3.0, 5.0],
                               atol=1e-5)
    assert doc["gap"] == pytest.approx(2.0, abs=1e-5)


# ------------------------------------------------------------- qsd

def test_qsd_csv_output(tmp_path, capsys):
    csv = tmp_path / "density.csv"
    rc, doc = run_cli(capsys, ["qsd", "--zoo", "perturbed_bessel",
                               "--param", "nu=-1.5", "--param", "c1=1",
                               "--csv", str(csv), "--points", "250"])
    assert rc == 0
    assert doc["lambda0"] == pytest.approx(3.0, abs=1e-6)
    assert doc["Z"] == pytest.approx(1.0111481164237088, rel=1e-9)
    assert doc["tail_mass"] < 1e-12
    assert doc["csv"] == str(csv)
    assert "x" not in doc and "density" not in doc

    raw = csv.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "x,density"
    assert len(lines) == 251
    xs, ys = np.loadtxt(str(csv), delimiter=",", skiprows=1, unpack=True)
    assert np.all(ys >= 0.0)
    # the printed table is itself a normalized density
    assert np.trapezoid(ys, xs) == pytest.approx(1.0, abs=5e-3)


# ------------------------------------------------------------- simulate

def test_simulate_is_deterministic(tmp_path, capsys):
    h1, h2 = tmp_path / "h1.csv", tmp_path / "h2.csv"
    argv = ["simulate", "--zoo", "bessel", "--param", "nu=-1.5",
            "--n", "400", "--dt", "0.01", "--t-max", "0.5", "--seed", "7",
            "--record", "0.25", "0.5", "--csv-hist"]
    rc1, d1 = run_cli(capsys, argv + [str(h1)])
    rc2, d2 = run_cli(capsys, argv + [str(h2)])
    assert rc1 == rc2 == 0
    d1.pop("csv_hist"), d2.pop("csv_hist")
    assert d1 == d2
    assert h1.read_bytes() == h2.read_bytes()

    res = d1["result"]
    assert res["n_survivors"] == 168
    assert res["n_absorbed"] == 232
    assert res["n_killed"] == 0
    assert res["recorded_times"] == [0.25, 0.5]
    assert res["n_alive"] == [307, 168]
    assert d1["settings"]["x0"] == 1.0        # defaulted to x_ref


def test_simulate_maps_x0_into_the_reduced_coordinate(capsys):
    rc, doc = run_cli(capsys, ["simulate", "--zoo", "population_N",
                               "--param", "mu=1", "--param", "c=1",
                               "--param", "sigma=1", "--param", "gamma=1",
                               "--x0", "2.0", "--n", "50", "--dt", "0.01",
                               "--t-max", "0.1", "--seed", "3"])
    assert rc == 0
    assert doc["reduced"] is True
    m = zoo_build("population_N", {"mu": 1, "c": 1, "sigma": 1, "gamma": 1})
    _, tr = reduce_unit_diffusion(m)
    assert doc["settings"]["x0"] == pytest.approx(float(tr.forward(2.0)),
                                                  rel=1e-12)


def test_simulate_fits_the_survival_rate(capsys):
    rc, doc = run_cli(capsys, ["simulate", "--zoo", "logistic_X_killed",
                               *LOGISTIC, "--n", "2000", "--dt", "0.01",
                               "--t-max", "2", "--seed", "9",
                               "--fit-survival"])
    assert rc == 0
    fit = doc["survival"]
    assert fit["rate_ci"][0] < fit["rate"] < fit["rate_ci"][1]
    # the bootstrap band brackets the true decay rate of this model
    assert fit["rate_ci"][0] < 1.3785477 < fit["rate_ci"][1]
    assert fit["r_squared"] > 0.99


# ------------------------------------------------------------- compare

def test_compare_outward_push_degrades_to_dichotomy(tmp_path, capsys):
    path = tmp_path / "push.json"
    path.write_text(json.dumps({"name": "custom", "drift_expr": "1",
                                "domain": [0.0, "inf"], "x_ref": 1.0}))
    rc, doc = run_cli(capsys, ["compare", "--model-json", str(path),
                               "--n", "6000", "--dt", "0.01",
                               "--t-max", "24", "--seed", "11"])
    assert rc == 0
    assert doc["positivity"]["A"] == "inf"
    assert doc["positivity"]["positive"] is False
    assert doc["dichotomy"]["verdict"] == "Escapes"
    assert doc["mode"] == "dichotomy-only"
    assert doc["tv_distance"] is None
    assert "spectrum" not in doc              # no eigenproblem was attempted


def test_compare_full_mode_on_killed_logistic(capsys):
    rc, doc = run_cli(capsys, ["compare", "--zoo", "logistic_X_killed",
                               *LOGISTIC, "--n", "6000", "--dt", "5e-3",
                               "--t-max", "8", "--seed", "11"])
    assert rc == 0
    assert doc["mode"] == "full"
    assert doc["dichotomy"]["verdict"] == "Converges"
    assert doc["spectrum"]["method"] == "schrodinger"
    assert doc["spectrum"]["eigenvalues"][0] == pytest.approx(1.3785477,
                                                              rel=1e-5)
    assert doc["gap"] > 1.5
    assert "survival" in doc
    assert 0.0 < doc["tv_distance"] < 0.1


# ------------------------------------------------------------- failure modes

def test_numerical_failure_exits_3_with_diagnostic(tmp_path, capsys):
    diag = tmp_path / "diag.json"
    rc = main(["--diagnostic", str(diag), "spectrum", "--zoo", "bessel",
               "--param", "nu=-1.5", "--method", "schrodinger"])
    captured = capsys.readouterr()
    assert rc == 3
    assert captured.out == ""
    assert "numerical failure" in captured.err
    saved = json.loads(diag.read_text())
    assert saved["command"] == "spectrum"
    assert saved["error"] == "QsdlabError"
    assert "whole line" in saved["message"]
    assert "settings" in saved


def test_unknown_zoo_name_exits_3(tmp_path, capsys):
    diag = tmp_path / "diag.json"
    rc = main(["--diagnostic", str(diag), "classify", "--zoo", "cauchy"])
    capsys.readouterr()
    assert rc == 3
    assert json.loads(diag.read_text())["error"] == "ModelValidationError"


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["spectrum", "--zoo", "bessel", "--param", "nu=-1.5",
              "--method", "bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["classify"])
    assert "--zoo" in str(exc.value.code)
    with pytest.raises(SystemExit) as exc:
        main(["classify", "--zoo", "bessel", "--param", "nu"])
    assert "key=value" in str(exc.value.code)


# ------------------------------------------------------------- output plumbing

def test_out_flag_writes_the_exact_stdout_document(tmp_path, capsys):
    out = tmp_path / "report.json"
    rc = main(["--out", str(out), "zoo"])
    assert rc == 0
    assert capsys.readouterr().out == ""
    raw = out.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    doc = json.loads(raw)
    want = json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"
    assert raw.decode() == want               # sorted keys, stable layout
