import csv
import json
import math
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vcmm import FitConfig, SimConfig, generate_dataset
from vcmm.cli import main
from vcmm.errors import (ConfigError, InconsistentClusterCovariate, ParseError, PipelineError,
                         SchemaError)
from vcmm.io import fmt, load_csv, read_config, to_json, write_csv
from vcmm.pipeline import RunSpec, analyze, run_pipeline, write_results


def write(path, text):
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def csv_path(tmp_path_factory, sim_data):
    path = tmp_path_factory.mktemp("data") / "sim.csv"
    write_csv(sim_data.data, path)
    return path


@pytest.fixture(scope="module")
def constant_csv(tmp_path_factory):
    """Every coefficient truly constant; ids are strings."""
    sim = SimConfig(m=120)
    sim = replace(sim, truth=sim.truth.constant(value=0.5))
    d = generate_dataset(sim, seed=21).data
    d = type(d)(d.y, d.u, d.x, d.z, d.offsets, tuple(f"g{i}" for i in range(d.m)))
    path = tmp_path_factory.mktemp("const") / "const.csv"
    write_csv(d, path)
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestCsv:
    def test_header_inference(self, csv_path):
        d = load_csv(csv_path)
        assert (d.p, d.q, d.m) == (3, 2, 100)
        assert d.ids[:3] == (0, 1, 2)

    def test_round_trip(self, csv_path, sim_data, tmp_path):
        d = load_csv(csv_path)
        assert d == sim_data.data
        again = tmp_path / "again.csv"
        write_csv(d, again)
        assert again.read_bytes() == csv_path.read_bytes()

    def test_inconsistent_z(self, tmp_path):
        p = write(tmp_path / "bad.csv", "cluster_id,y,u,x1,z1\na,1,0.1,1,0\na,2,0.2,1,1\n")
        with pytest.raises(InconsistentClusterCovariate):
            load_csv(p)

    @pytest.mark.parametrize("body, row", [("a,1,0.1,1\na,2,0.2\n", 3),
                                           ("a,1,0.1,1\na,zz,0.2,1\n", 3),
                                           ("a,1,0.1,1,7\n", 2)])
    def test_parse_error_row(self, tmp_path, body, row):
        p = write(tmp_path / "bad.csv", "cluster_id,y,u,x1\n" + body)
        with pytest.raises(ParseError) as info:
            load_csv(p)
        assert info.value.row == row

    @pytest.mark.parametrize("header", ["y,u,x1", "cluster_id,y,u", "cluster_id,y,u,x2",
                                        "cluster_id,y,u,x1,z1,x2", "cluster_id,y,u,x1,w"])
    def test_bad_header(self, tmp_path, header):
        with pytest.raises(SchemaError):
            load_csv(write(tmp_path / "h.csv", header + "\n"))

    def test_empty_and_missing(self, tmp_path):
        with pytest.raises(SchemaError):
            load_csv(write(tmp_path / "e.csv", ""))
        with pytest.raises(SchemaError):
            load_csv(write(tmp_path / "norows.csv", "cluster_id,y,u,x1\n"))
        with pytest.raises(SchemaError):
            load_csv(tmp_path / "nope.csv")

    def test_mixed_ids_stay_strings(self, tmp_path):
        p = write(tmp_path / "ids.csv", "cluster_id,y,u,x1\n1,1,0.1,1\n01,1,0.2,2\n")
        assert load_csv(p).ids == ("1", "01")


class TestConfig:
    def test_valid(self, tmp_path):
        p = write(tmp_path / "c.toml", 'seed = 3\n[fit]\nh = 0.2\nkernel = "uniform"\n'
                                       '[analysis]\nlevel = 0.1\nprofiles = [[0, 1]]\n')
        doc = read_config(p)
        assert doc["fit"]["kernel"] == "uniform" and doc["seed"] == 3

    @pytest.mark.parametrize("text", ["[fit]\nbandwidth = 0.2\n", "[plot]\nx = 1\n",
                                      "verbose = true\n", "[fit\nh = 1\n", "fit = 3\n"])
    def test_rejected(self, tmp_path, text):
        with pytest.raises(ConfigError):
            read_config(write(tmp_path / "c.toml", text))

    def test_missing_bandwidth(self, csv_path, tmp_path):
        with pytest.raises(PipelineError) as info:
            run_pipeline(RunSpec("fit", csv_path, out=tmp_path))
        assert info.value.stage == "config"

    def test_runspec_validation(self, csv_path):
        with pytest.raises(ConfigError):
            RunSpec("fit")
        with pytest.raises(ConfigError):
            RunSpec("fit", csv_path, h=-1)
        with pytest.raises(ConfigError):
            RunSpec("plot", csv_path)


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_seventeen_digits_round_trip(x):
    assert float(fmt(x)) == x


def test_json_emitter():
    text = to_json({"b": [1.5, float("nan")], "a": np.array([[0.1]]), "c": True, "d": None})
    assert json.loads(text) == {"b": [1.5, None], "a": [[0.1]], "c": True, "d": None}
    assert "0.10000000000000001" in text


# ---------------------------------------------------------------- pipeline outputs

@pytest.fixture(scope="module")
def report_run(constant_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("report")
    cfgfile = out / "run.toml"
    cfgfile.write_text("[fit]\nh = 0.2\n[analysis]\nlevel = 0.01\n"
                       "profiles = [[0.0, 0.0], [1.0, -2.0]]\n")
    report = run_pipeline(RunSpec("report", constant_csv, cfgfile, out))
    write_results(report, out)
    return report, out


class TestReport:
    def test_classification_exhaustive(self, report_run):
        report, _ = report_run
        cls = [report.classification(n) for n in report.names]
        assert set(cls) <= {"constant", "varying"}
        assert set(report.constant_names) | set(report.varying_names) == set(report.names)
        assert not set(report.constant_names) & set(report.varying_names)

    def test_constants_found(self, report_run):
        report, out = report_run
        assert report.varying_names == ()
        for c in report.constants.values():
            assert c.value == pytest.approx(0.5, abs=6 * c.se)
        rows = read_rows(out / "curves.csv")
        assert rows == [["coef", "u", "estimate", "bias", "center", "se", "band_lo", "band_hi"]]
        tests = read_rows(out / "tests.csv")
        assert len(tests) == 1 + 11
        assert {r[-1] for r in tests[1:]} == {"constant"}

    def test_composed_effect(self, report_run):
        report, _ = report_run
        (z0, e0), (z1, e1) = report.effects
        k = {nm: c.value for nm, c in report.constants.items()}
        base = np.array([k[f"alpha0_{j}"] for j in (1, 2, 3)])
        np.testing.assert_allclose(e0, np.tile(base, (e0.shape[0], 1)), atol=1e-12)
        want = base + np.array([k[f"alpha1_{j}"] - 2 * k[f"alpha2_{j}"] for j in (1, 2, 3)])
        np.testing.assert_allclose(e1, np.tile(want, (e1.shape[0], 1)), atol=1e-12)

    def test_json_parses(self, report_run):
        _, out = report_run
        res = json.loads((out / "results.json").read_text())
        assert res["subcommand"] == "report"
        assert len(res["coefficients"]) == 11
        vc = json.loads((out / "varcomp.json").read_text())
        assert set(vc["random_effects"]) == {f"g{i}" for i in range(120)}


@pytest.fixture(scope="module")
def out(csv_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("bands")
    write_results(run_pipeline(RunSpec("bands", csv_path, out=out, h=0.15, grid=41)), out)
    return out


class TestBandsOutput:
    def test_band_contains_center(self, out):
        rows = read_rows(out / "curves.csv")[1:]
        assert len(rows) == 11 * 41
        for r in rows:
            lo, c, hi = float(r[6]), float(r[4]), float(r[7])
            assert lo <= c <= hi
            assert float(r[2]) - float(r[3]) == pytest.approx(c, abs=1e-15)

    def test_values_reparse_exactly(self, out):
        rows = read_rows(out / "curves.csv")[1:]
        for r in rows[:200]:
            for cell in r[1:]:
                assert fmt(float(cell)) == cell

    def test_rerun_identical(self, csv_path, out, tmp_path):
        write_results(run_pipeline(RunSpec("bands", csv_path, out=tmp_path, h=0.15, grid=41)),
                      tmp_path)
        for name in ("results.json", "curves.csv", "varcomp.json"):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_stage_outputs(sim_data, tmp_path):
    cfg = FitConfig(h=0.2, grid_count=11)
    fit = analyze(sim_data.data, cfg, "fit")
    assert fit.varcomp is None and not fit.tests
    files = write_results(fit, tmp_path / "f")
    assert [f.name for f in files] == ["results.json", "curves.csv"]
    rows = read_rows(tmp_path / "f" / "curves.csv")
    assert len(rows) == 1 + 11 * 11 and rows[1][3] == ""
    test = analyze(sim_data.data, cfg, "test")
    assert set(test.tests) == set(test.names) and test.classification("alpha0_1") is None


# ---------------------------------------------------------------- command line

class TestCli:
    def test_success(self, csv_path, tmp_path, capsys):
        assert main(["varcomp", "--input", str(csv_path), "--h", "0.2",
                     "--out", str(tmp_path)]) == 0
        assert (tmp_path / "varcomp.json").exists()
        assert capsys.readouterr().out == ""

    def test_load_error_payload(self, tmp_path, capsys):
        p = write(tmp_path / "bad.csv", "cluster_id,y,u,x1\na,1,0.1,1\na,x,0.2,1\n")
        assert main(["fit", "--input", str(p), "--h", "0.2", "--out", str(tmp_path)]) == 1
        err = json.loads(capsys.readouterr().err)
        assert err == {"error": "ParseError", "message": err["message"], "stage": "load",
                       "row": 3}

    def test_missing_input_file(self, tmp_path, capsys):
        assert main(["fit", "--input", str(tmp_path / "no.csv"), "--h", "0.2"]) == 1
        assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"

    def test_fit_error_has_location(self, tmp_path, capsys):
        rows = "\n".join(f"{i % 3},{i},{i / 40},{math.sin(i)}" for i in range(40))
        p = write(tmp_path / "tiny.csv", "cluster_id,y,u,x1\n" + rows + "\n")
        assert main(["fit", "--input", str(p), "--h", "0.02", "--out", str(tmp_path)]) == 1
        err = json.loads(capsys.readouterr().err)
        assert err["stage"] == "fit" and err["error"] == "InsufficientLocalData"
        assert "u0" in err

    def test_usage_error(self):
        with pytest.raises(SystemExit) as info:
            main(["fit"])
        assert info.value.code == 2

    def test_simulate_module_entry(self, tmp_path):
        cfg = write(tmp_path / "sim.toml", "[fit]\nh = 0.3\n[simulate]\nstudy = \"mise\"\n"
                                           "m = 30\nreps = 2\n")
        outs = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            proc = subprocess.run([sys.executable, "-m", "vcmm", "simulate", "--config",
                                   str(cfg), "--seed", "5", "--out", str(out)],
                                  capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            outs.append(out)
        for name in ("simulation.json", "simulation.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        doc = json.loads((outs[0] / "simulation.json").read_text())
        assert doc["study"] == "mise" and doc["seed"] == 5 and doc["reps"] == 2
