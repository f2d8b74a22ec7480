import csv
import json

import numpy as np
import pytest

from conftest import simulated
from lifespan_gamm.cli import main
from lifespan_gamm.data import load_dataset, write_dataset
from lifespan_gamm.model import ModelSpec, Parametric, RandomIntercept, fit_model, load_model


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "data.csv"
    write_dataset(simulated(n=150, seed=3)[1], path)
    return path


@pytest.fixture(scope="module")
def fitted_dirs(data_csv, tmp_path_factory):
    dirs = {}
    for variant in ("1b", "3a"):
        d = tmp_path_factory.mktemp(f"fit{variant}")
        assert main(["fit", "--data", str(data_csv), "--variant", variant, "--out", str(d)]) == 0
        dirs[variant] = d
    return dirs


class TestFit:
    def test_outputs(self, fitted_dirs):
        names = {p.name for p in fitted_dirs["3a"].iterdir()}
        assert names == {"model.json", "p_table.csv", "s_table.csv", "variance_components.csv",
                         "smoothing_parameters.csv"}

    def test_birth_date_interval(self, fitted_dirs):
        row = next(r for r in read_csv(fitted_dirs["3a"] / "p_table.csv") if r["term"] == "birth_date")
        est, se = float(row["estimate"]), float(row["se"])
        assert float(row["lower"]) == pytest.approx(est - 1.959964 * se, abs=1e-5 * se)
        assert float(row["upper"]) == pytest.approx(est + 1.959964 * se, abs=1e-5 * se)

    def test_tables(self, fitted_dirs):
        s_rows = read_csv(fitted_dirs["3a"] / "s_table.csv")
        assert [r["term"] for r in s_rows] == ["s(age)"]
        rows = read_csv(fitted_dirs["3a"] / "variance_components.csv")
        assert [(r["group"], r["name"]) for r in rows] == [("participant", "(Intercept)"), ("Xr", "s(age)"),
                                                          ("Residual", "")]

    def test_summary_printed(self, data_csv, tmp_path, capsys):
        code, out, _ = run(capsys, "fit", "--data", data_csv, "--variant", "3a", "--out", tmp_path)
        assert code == 0
        assert "Parametric coefficients (95% CI):" in out and "birth_date" in out and "Std.Dev." in out

    def test_no_smooth_terms(self, data_csv, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        ModelSpec((Parametric("age"), RandomIntercept())).save(spec)
        code, out, _ = run(capsys, "fit", "--data", data_csv, "--spec", spec, "--out", tmp_path / "o")
        assert code == 0
        assert "No smooth terms: plain regression fit." in out
        assert read_csv(tmp_path / "o" / "s_table.csv") == []

    def test_refit_from_saved_spec(self, fitted_dirs, data_csv):
        saved = load_model(fitted_dirs["3a"] / "model.json")
        refit = fit_model(saved.spec, load_dataset(data_csv))
        np.testing.assert_allclose(refit.beta_hat, saved.beta_hat, rtol=0, atol=1e-10)


class TestEffects:
    def test_1b_curves(self, fitted_dirs, tmp_path, capsys):
        code, _, _ = run(capsys, "effects", "--model", fitted_dirs["1b"] / "model.json", "--out", tmp_path,
                         "--grid-min", 10, "--grid-max", 85, "--grid-step", 0.5)
        assert code == 0
        cross = read_csv(tmp_path / "cross_sectional.csv")
        lon = read_csv(tmp_path / "longitudinal.csv")
        age = np.array([float(r["abscissa"]) for r in cross])
        np.testing.assert_allclose(np.diff(age), 0.5)
        est = {a: float(r["estimate"]) for a, r in zip(age, cross)}
        assert sorted({r["baseline_age"] for r in lon}) == ["10.0", "30.0", "50.0", "70.0"]
        for a1 in (10.0, 30.0, 50.0, 70.0):
            rows = [r for r in lon if float(r["baseline_age"]) == a1]
            t = np.array([float(r["abscissa"]) for r in rows])
            eff = np.array([float(r["estimate"]) for r in rows])
            assert eff[0] == 0.0 and t[0] == 0.0 and t[-1] == 15.0
            np.testing.assert_allclose(np.diff(t), 0.5)
            np.testing.assert_allclose(eff, [est[a1 + s] - est[a1] for s in t], atol=1e-10)

    def test_cohort_model_needs_date(self, fitted_dirs, tmp_path, capsys):
        out = tmp_path / "new"
        code, _, err = run(capsys, "effects", "--model", fitted_dirs["3a"] / "model.json", "--out", out)
        assert code == 1
        payload = json.loads(err.strip().splitlines()[-1])
        assert payload["error"] == "config" and "--date" in payload["message"]
        assert not out.exists()

    def test_cohort_model_with_date(self, fitted_dirs, tmp_path, capsys):
        code, _, _ = run(capsys, "effects", "--model", fitted_dirs["3a"] / "model.json", "--out", tmp_path,
                         "--date", "2005-07-01", "--baselines", "20,40", "--horizon", 5, "--grid-step", 1)
        assert code == 0
        lon = read_csv(tmp_path / "longitudinal.csv")
        assert len(lon) == 12 and float(lon[0]["estimate"]) == 0.0


class TestPredictAndSample:
    def test_predict(self, fitted_dirs, tmp_path, capsys):
        code, _, _ = run(capsys, "predict", "--model", fitted_dirs["1b"] / "model.json", "--out", tmp_path,
                         "--grid-min", 20, "--grid-max", 30, "--grid-step", 1)
        assert code == 0
        rows = read_csv(tmp_path / "predictions.csv")
        assert [float(r["age"]) for r in rows] == list(np.arange(20.0, 31.0))

    def test_sample_deterministic_across_workers(self, fitted_dirs, tmp_path, capsys):
        outs = []
        for workers in (1, 3):
            d = tmp_path / f"w{workers}"
            code, _, _ = run(capsys, "sample", "--model", fitted_dirs["1b"] / "model.json", "--out", d,
                             "--draws", 3000, "--seed", 7, "--workers", workers, "--grid-step", 1)
            assert code == 0
            outs.append(d)
        for name in ("bands.csv", "draws.csv", "age_at_max.csv", "age_at_max_summary.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        bands = read_csv(outs[0] / "bands.csv")
        pw = [r for r in bands if r["kind"] == "pointwise"]
        sm = [r for r in bands if r["kind"] == "simultaneous"]
        assert len(pw) == len(sm) > 0
        assert all(float(s["upper"]) >= float(p["upper"]) for p, s in zip(pw, sm))

    def test_check(self, fitted_dirs, data_csv, tmp_path, capsys):
        code, out, _ = run(capsys, "check", "--model", fitted_dirs["3a"] / "model.json", "--data", data_csv,
                           "--out", tmp_path)
        assert code == 0
        row = read_csv(tmp_path / "check.csv")[0]
        assert row["term"] == "s(age)" and int(row["k_prime"]) == 19
        assert "k-index" in out


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("sim")
    for name, workers in (("a", 1), ("b", 1), ("c", 2)):
        assert main(["simulate", "--preset", "quick", "--replicates", "2", "--seed", "3",
                     "--workers", str(workers), "--out", str(base / name)]) == 0
    return base


class TestSimulate:
    def test_byte_identical_reruns(self, runs):
        for name in ("cells.csv", "averages.csv", "failures.csv", "cross_sectional.csv", "run.json"):
            a = (runs / "a" / name).read_bytes()
            assert a == (runs / "b" / name).read_bytes() == (runs / "c" / name).read_bytes()

    def test_metadata(self, runs):
        meta = json.loads((runs / "a" / "run.json").read_text())
        assert meta["preset"] == "quick" and meta["master_seed"] == 3 and meta["n_replicates"] == 2

    def test_averages_identity(self, runs):
        for r in read_csv(runs / "a" / "averages.csv"):
            assert float(r["rmse"]) ** 2 == pytest.approx(float(r["bias"]) ** 2 + float(r["variance"]), rel=1e-10)

    def test_report(self, runs, capsys):
        code, out, _ = run(capsys, "report", "--results", runs / "a")
        assert code == 0
        checks = read_csv(runs / "a" / "checks.csv")
        assert len(checks) == 12 and {r["passed"] for r in checks} <= {"True", "False"}
        assert "ordering[none]" in out

    def test_report_without_results(self, tmp_path, capsys):
        code, _, err = run(capsys, "report", "--results", tmp_path)
        assert code == 1 and json.loads(err)["error"] == "config"


class TestConfigAndErrors:
    def test_config_file_with_flag_override(self, data_csv, tmp_path, capsys):
        conf = tmp_path / "run.conf"
        conf.write_text(f"data = {data_csv}\nvariant = 3a\nlevel = 0.9\nout = {tmp_path / 'o'}\n")
        code, out, _ = run(capsys, "fit", "--config", conf, "--level", 0.8)
        assert code == 0 and "(80% CI)" in out
        row = next(r for r in read_csv(tmp_path / "o" / "p_table.csv") if r["term"] == "birth_date")
        est, se = float(row["estimate"]), float(row["se"])
        assert float(row["upper"]) == pytest.approx(est + 1.2815516 * se, rel=1e-6)

    def test_unknown_config_key(self, tmp_path, capsys):
        conf = tmp_path / "run.conf"
        conf.write_text("colour = blue\n")
        code, _, err = run(capsys, "fit", "--config", conf)
        assert code == 1 and "colour" in json.loads(err)["message"]

    def test_missing_data(self, tmp_path, capsys):
        code, _, err = run(capsys, "fit", "--variant", "1b", "--out", tmp_path / "x")
        payload = json.loads(err)
        assert code == 1 and payload == {"error": "config", "type": "ConfigError",
                                         "message": "--data is required for 'fit'"}

    def test_identifiability_error_cleans_up(self, tmp_path, capsys):
        path = tmp_path / "same.csv"
        write_dataset(simulated(n=80, baseline_date_range=(2005.0, 2005.0), interval_range_years=(0.0, 0.0))[1], path)
        out = tmp_path / "out"
        code, _, err = run(capsys, "fit", "--data", path, "--variant", "3b", "--out", out)
        assert code == 1 and json.loads(err)["error"] == "identifiability"
        assert not out.exists()

    def test_bad_level(self, tmp_path, capsys):
        code, _, err = run(capsys, "fit", "--variant", "1b", "--level", 1.5, "--out", tmp_path)
        assert code == 1 and json.loads(err)["error"] == "config"
