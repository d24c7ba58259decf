"""Command-line round trips, error contracts, determinism, formats."""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from smoothfit.cli import main, read_table
from smoothfit.errors import SpecError


def write_csv(path, cols):
    names = list(cols)
    n = len(next(iter(cols.values())))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for i in range(n):
            w.writerow([cols[c][i] for c in names])


@pytest.fixture
def workspace(tmp_path):
    rng = np.random.default_rng(42)
    n = 150
    x = rng.uniform(-1, 1, n)
    v = rng.uniform(-1, 1, n)
    y = 2 * np.sin(np.pi * (x + 1) / 2) + 0.4 * v + rng.normal(0, 0.8, n)
    data = tmp_path / "train.csv"
    write_csv(data, {"y": [float(t) for t in y],
                     "x": [float(t) for t in x],
                     "v": [float(t) for t in v]})
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({
        "response": "y",
        "terms": [{"kind": "intercept"},
                  {"kind": "linear", "covariates": ["v"]},
                  {"kind": "smooth", "covariates": ["x"], "k": 10}]}))
    spec0 = tmp_path / "spec0.json"
    spec0.write_text(json.dumps({
        "response": "y",
        "terms": [{"kind": "intercept"},
                  {"kind": "linear", "covariates": ["v"]}]}))
    return tmp_path, data, spec, spec0, x, v, y


class TestReadTable:
    def test_rejects_na_with_line_number(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1.0,2.0\n3.0,NA\n")
        with pytest.raises(SpecError, match="line 3"):
            read_table(p)

    def test_rejects_ragged_rows(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1.0\n")
        with pytest.raises(SpecError, match="line 2"):
            read_table(p)

    def test_header_required(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("")
        with pytest.raises(SpecError, match="header"):
            read_table(p)

    def test_factor_columns_stay_strings(self, tmp_path):
        p = tmp_path / "ok.csv"
        p.write_text("a,g\n1.0,s1\n2.5,s2\n")
        t = read_table(p)
        assert t["a"].dtype.kind == "f"
        assert t["g"].dtype.kind in ("U", "O", "S")


class TestFit:
    def test_intercept_only(self, tmp_path):
        write_csv(tmp_path / "d.csv", {"y": [1.0, 2.0, 3.0],
                                       "c": [0.0, 0.0, 0.0]})
        (tmp_path / "s.json").write_text(json.dumps(
            {"response": "y", "terms": [{"kind": "intercept"}]}))
        rc = main(["fit", "--data", str(tmp_path / "d.csv"),
                   "--spec", str(tmp_path / "s.json"),
                   "--engine", "am", "--out", str(tmp_path / "m.json")])
        assert rc == 0
        art = json.loads((tmp_path / "m.json").read_text())
        assert abs(art["coefficients"][0] - 2.0) < 1e-10
        assert np.isfinite(art["phi"])

    def test_malformed_csv_exit_2(self, workspace):
        tmp, data, spec, *_ = workspace
        bad = tmp / "bad.csv"
        bad.write_text("y,x,v\n1.0,0.1,0.2\n2.0,NA,0.3\n")
        rc = main(["fit", "--data", str(bad), "--spec", str(spec),
                   "--engine", "am", "--out", str(tmp / "m.json")])
        assert rc == 2

    def test_engine_family_validated(self, workspace):
        tmp, data, spec, *_ = workspace
        rc = main(["fit", "--data", str(data), "--spec", str(spec),
                   "--engine", "am", "--family", "gamma",
                   "--out", str(tmp / "m.json")])
        assert rc == 2

    def test_deterministic_artifact(self, workspace):
        tmp, data, spec, *_ = workspace
        for name in ("m1.json", "m2.json"):
            rc = main(["fit", "--data", str(data), "--spec", str(spec),
                       "--engine", "am", "--seed", "7",
                       "--out", str(tmp / name)])
            assert rc == 0
        assert (tmp / "m1.json").read_bytes() == \
            (tmp / "m2.json").read_bytes()


class TestPredict:
    def test_training_rows_reproduce_fit(self, workspace):
        tmp, data, spec, _, x, v, y = workspace
        main(["fit", "--data", str(data), "--spec", str(spec),
              "--engine", "am", "--out", str(tmp / "m.json")])
        rc = main(["predict", "--artifact", str(tmp / "m.json"),
                   "--data", str(data), "--out", str(tmp / "pred.csv")])
        assert rc == 0
        art = json.loads((tmp / "m.json").read_text())
        pred = read_table(tmp / "pred.csv")
        # in-process fitted values from the artifact
        from smoothfit.cli import RestoredFit
        restored = RestoredFit(art)
        table = read_table(data)
        mu = np.asarray(restored.predict_rows(table)
                        @ np.asarray(art["coefficients"]))
        np.testing.assert_allclose(pred["mu"], mu, atol=1e-12)
        # interval half-widths match the library call
        from smoothfit import uncertainty as unc
        from smoothfit.cli import fit_from_config
        fit, design, _ = fit_from_config(art["spec_doc"], table,
                                         {"engine": "am",
                                          "family": "gaussian",
                                          "link": None})
        Xp = design.build_rows(table)
        _, lo, hi, _ = unc.credible_intervals(fit, Xp, level=0.95)
        np.testing.assert_allclose(pred["eta_0_hi"] - pred["eta_0_lo"],
                                   hi - lo, atol=1e-10)

    def test_empty_prediction_table(self, workspace, tmp_path):
        tmp, data, spec, *_ = workspace
        main(["fit", "--data", str(data), "--spec", str(spec),
              "--engine", "am", "--out", str(tmp / "m.json")])
        empty = tmp / "empty.csv"
        empty.write_text("y,x,v\n")
        rc = main(["predict", "--artifact", str(tmp / "m.json"),
                   "--data", str(empty), "--out", str(tmp / "pred.csv")])
        assert rc == 0
        lines = (tmp / "pred.csv").read_text().strip().splitlines()
        assert len(lines) == 1  # header only

    def test_out_of_range_clamped(self, workspace, caplog):
        tmp, data, spec, *_ = workspace
        main(["fit", "--data", str(data), "--spec", str(spec),
              "--engine", "am", "--out", str(tmp / "m.json")])
        far = tmp / "far.csv"
        write_csv(far, {"y": [0.0], "x": [5.0], "v": [0.0]})
        with caplog.at_level("WARNING"):
            rc = main(["predict", "--artifact", str(tmp / "m.json"),
                       "--data", str(far), "--out", str(tmp / "p.csv")])
        assert rc == 0
        assert "clamped" in caplog.text


class TestAic:
    def test_identical_artifacts_zero_difference(self, workspace):
        tmp, data, spec, *_ = workspace
        main(["fit", "--data", str(data), "--spec", str(spec),
              "--engine", "am", "--out", str(tmp / "a.json")])
        main(["fit", "--data", str(data), "--spec", str(spec),
              "--engine", "am", "--out", str(tmp / "b.json")])
        rc = main(["aic", str(tmp / "a.json"), str(tmp / "b.json"),
                   "--data", str(data), "--out", str(tmp / "cmp.csv")])
        assert rc == 0
        t = read_table(tmp / "cmp.csv")
        assert abs(t["caic_conventional"][0]
                   - t["caic_conventional"][1]) < 1e-9

    def test_variant_columns_match_request(self, workspace):
        tmp, data, spec, spec0, *_ = workspace
        main(["fit", "--data", str(data), "--spec", str(spec),
              "--engine", "am", "--out", str(tmp / "a.json")])
        main(["fit", "--data", str(data), "--spec", str(spec0),
              "--engine", "am", "--out", str(tmp / "b.json")])
        rc = main(["aic", str(tmp / "a.json"), str(tmp / "b.json"),
                   "--data", str(data),
                   "--aic-variant", "conventional,mc_gaussian",
                   "--nr", "40", "--out", str(tmp / "cmp.csv")])
        assert rc == 0
        with open(tmp / "cmp.csv") as fh:
            header = fh.readline().strip().split(",")
        assert "caic_conventional" in header
        assert "caic_mc_gaussian" in header
        assert "caic_pql_corrected" not in header


class TestSampleAndSimulate:
    def test_sample_deterministic(self, workspace):
        tmp, data, spec, *_ = workspace
        main(["fit", "--data", str(data), "--spec", str(spec),
              "--engine", "am", "--out", str(tmp / "m.json")])
        for name in ("d1.csv", "d2.csv"):
            rc = main(["sample", "--artifact", str(tmp / "m.json"),
                       "--data", str(data), "--n", "20", "--seed", "3",
                       "--out", str(tmp / name)])
            assert rc == 0
        assert (tmp / "d1.csv").read_bytes() == (tmp / "d2.csv").read_bytes()

    def test_simulate_s1_rows(self, tmp_path):
        rc = main(["simulate", "--study", "s1", "--replicates", "2",
                   "--n", "100", "--out", str(tmp_path / "s.csv")])
        assert rc == 0
        t = read_table(tmp_path / "s.csv")
        assert len(t["mse"]) == 4  # 2 replicates x 2 engines
        assert np.all(np.isfinite(t["mse"]))

    def test_simulate_s5_selection_columns(self, tmp_path):
        rc = main(["simulate", "--study", "s5", "--replicates", "2",
                   "--n", "200", "--effect", "0.0", "--nr", "30",
                   "--out", str(tmp_path / "s.csv")])
        assert rc == 0
        with open(tmp_path / "s.csv") as fh:
            header = fh.readline().strip().split(",")
        for v in ("conventional", "pql_corrected", "mc_gaussian"):
            assert f"select_{v}" in header

    def test_simulate_deterministic(self, tmp_path):
        for name in ("a.csv", "b.csv"):
            main(["simulate", "--study", "s4", "--replicates", "1",
                  "--n", "150", "--effect", "0.5", "--nr", "25",
                  "--seed", "11", "--out", str(tmp_path / name)])
        assert (tmp_path / "a.csv").read_bytes() == \
            (tmp_path / "b.csv").read_bytes()


class TestGsmmCli:
    def test_coxph_fit_and_predict(self, tmp_path):
        rng = np.random.default_rng(1)
        n = 120
        x = rng.uniform(-1, 1, n)
        rate = np.exp(0.8 * x)
        t = rng.exponential(1.0 / rate)
        data = tmp_path / "surv.csv"
        write_csv(data, {"t": [float(v) for v in t],
                         "d": [1.0] * n,
                         "x": [float(v) for v in x]})
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({
            "response": "t", "event": "d",
            "terms": [{"kind": "smooth", "covariates": ["x"], "k": 8}]}))
        rc = main(["fit", "--data", str(data), "--spec", str(spec),
                   "--engine", "gsmm", "--family", "coxph",
                   "--out", str(tmp_path / "m.json")])
        assert rc == 0
        rc = main(["predict", "--artifact", str(tmp_path / "m.json"),
                   "--data", str(data), "--out", str(tmp_path / "p.csv")])
        assert rc == 0
        p = read_table(tmp_path / "p.csv")
        assert np.all(np.isfinite(p["eta_0"]))


class TestNumpyFallbackBackend:
    def test_kernels_agree_with_numba(self, tmp_path):
        # run a small fit in a subprocess with the numpy backend and compare
        # coefficients against the in-process (numba) result
        code = (
            "import numpy as np\n"
            "from smoothfit.design import ModelSpec, TermSpec, build_design\n"
            "from smoothfit import efs, backend_name\n"
            "rng = np.random.default_rng(0)\n"
            "x = rng.uniform(-1, 1, 120)\n"
            "y = np.sin(2 * x) + rng.normal(0, 0.3, 120)\n"
            "d = build_design(ModelSpec([TermSpec('intercept'),"
            "TermSpec('smooth', ['x'], k=8)]), {'x': x})\n"
            "fit = efs.fit_additive(d, y)\n"
            "print(backend_name())\n"
            "print(repr(fit.beta.tolist()))\n"
        )
        import os
        env = dict(os.environ, SMOOTHFIT_NUMBA="0")
        out = subprocess.run([sys.executable, "-c", code], env=env,
                             capture_output=True, text=True, check=True)
        lines = out.stdout.strip().splitlines()
        assert lines[0] == "numpy"
        beta_np = np.array(eval(lines[1]))
        rng = np.random.default_rng(0)
        from smoothfit.design import ModelSpec, TermSpec, build_design
        from smoothfit import efs
        x = rng.uniform(-1, 1, 120)
        y = np.sin(2 * x) + rng.normal(0, 0.3, 120)
        d = build_design(ModelSpec([TermSpec("intercept"),
                                    TermSpec("smooth", ["x"], k=8)]),
                         {"x": x})
        fit = efs.fit_additive(d, y)
        np.testing.assert_allclose(fit.beta, beta_np, atol=1e-10)
