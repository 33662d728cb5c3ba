import csv
import json

import numpy as np
import pytest

from cellvar.cli import main

FAST = ["--steps", "1500", "--burn-in", "600", "--thin", "3"]


def run(argv):
    return main(argv)


def synth_dir(tmp_path, model="linear1", k=12, seed=5, extra=()):
    out = tmp_path / f"synth_{model}_{seed}"
    code = run(["synth", "--model", model, "--k", str(k), "--seed", str(seed),
                "--out", str(out), *extra])
    assert code == 0
    return out


def manifest_of(outdir):
    return json.loads((outdir / "manifest.json").read_text())


class TestSynth:
    def test_emits_parseable_dataset(self, tmp_path, capsys):
        out = synth_dir(tmp_path, k=40, seed=1, model="linexp")
        assert (out / "data.csv").exists()
        truth = json.loads((out / "truth.json").read_text())
        assert len(truth["theta"]) == 40
        fit_out = tmp_path / "fit"
        code = run(["fit", "--model", "linexp", "--data", str(out / "data.csv"),
                    "--normalization", "none", "--seed", "7", *FAST,
                    "--out", str(fit_out), "--no-figures", "--threads", "1"])
        assert code == 0
        assert (fit_out / "summary.csv").exists()

    def test_degenerate_population_identical_traces(self, tmp_path):
        out = synth_dir(tmp_path, k=4, seed=2,
                        extra=["--sigma-star", "0", "--noise", "0"])
        rows = list(csv.DictReader((out / "data.csv").open()))
        by_cell = {}
        for row in rows:
            by_cell.setdefault(row["cell_id"], []).append(row["capacity"])
        values = list(by_cell.values())
        assert all(v == values[0] for v in values)

    def test_truth_sidecar_count(self, tmp_path):
        out = synth_dir(tmp_path, k=9, seed=3)
        truth = json.loads((out / "truth.json").read_text())
        assert len(truth["theta"]) == 9


class TestFit:
    def test_five_cell_pipeline(self, tmp_path, capsys):
        out = synth_dir(tmp_path, k=5, seed=7)
        fit_out = tmp_path / "fit5"
        code = run(["fit", "--model", "linear1", "--data", str(out / "data.csv"),
                    "--normalization", "none", "--seed", "7", *FAST,
                    "--out", str(fit_out), "--no-figures", "--threads", "1"])
        assert code == 0
        cells = sorted(p.name for p in (fit_out / "cells").glob("*.json"))
        assert len(cells) == 5
        with (fit_out / "summary.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 5
        assert "c1_mean" in rows[0]
        out_text = capsys.readouterr().out
        assert "cell_0" in out_text

    def test_missing_model_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run(["fit", "--data", "x.csv", "--out", str(tmp_path / "o")])
        assert exc.value.code == 2

    def test_missing_file_is_runtime_error(self, tmp_path, capsys):
        code = run(["fit", "--model", "linear1", "--data", "missing.csv",
                    "--out", str(tmp_path / "o"), "--no-figures"])
        assert code == 1
        record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert record["error"] == "IngestError"

    def test_linexp_on_knee_free_data_surfaces_flags(self, tmp_path, capsys):
        out = synth_dir(tmp_path, k=5, seed=11)   # pure linear data
        fit_out = tmp_path / "fit_linexp"
        code = run(["fit", "--model", "linexp", "--data", str(out / "data.csv"),
                    "--normalization", "none", "--seed", "3", *FAST,
                    "--out", str(fit_out), "--no-figures", "--threads", "1"])
        assert code == 0
        err = capsys.readouterr().err
        with (fit_out / "summary.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        flagged = [r for r in rows
                   if r["converged"] == "False" or r["ls_converged"] == "False"]
        assert flagged, "knee fits on knee-free data should raise flags"
        assert "warning" in err and "convergence" in err

    def test_figures_rendered_by_default(self, tmp_path):
        out = synth_dir(tmp_path, k=5, seed=13)
        fit_out = tmp_path / "fit_figs"
        code = run(["fit", "--model", "linear1", "--data", str(out / "data.csv"),
                    "--normalization", "none", *FAST, "--out", str(fit_out),
                    "--threads", "1"])
        assert code == 0
        assert (fit_out / "fit_overview.png").stat().st_size > 0


class TestStudy:
    def _study(self, tmp_path, out_name, extra=()):
        data = synth_dir(tmp_path, k=12, seed=5)
        out = tmp_path / out_name
        code = run(["study", "--model", "linear1", "--data", str(data / "data.csv"),
                    "--normalization", "none", "--repeats", "15",
                    "--master-seed", "9", *FAST, "--out", str(out),
                    "--threads", "1", *extra])
        assert code == 0
        return out

    def test_final_line_and_tables(self, tmp_path, capsys):
        out = self._study(tmp_path, "study1", extra=["--no-figures"])
        final = capsys.readouterr().out.strip().splitlines()[-1]
        assert final.startswith("required_N=")
        value = final.split("=", 1)[1]
        if value != "not-reached":
            assert 3 <= int(value) <= 9
        for name in ("study_result.json", "dispersion_vs_n.csv",
                     "required_n.csv", "sample_vs_population.csv",
                     "single_draw.csv"):
            assert (out / name).exists()
        result = json.loads((out / "study_result.json").read_text())
        assert result["schema"] == 1
        assert result["curves"]["ns"][0] == 3

    def test_flags_echoed_in_manifest(self, tmp_path, capsys):
        out = self._study(tmp_path, "study2",
                          extra=["--alpha", "0.2", "--no-figures"])
        capsys.readouterr()
        manifest = manifest_of(out)
        assert manifest["resolved_config"]["repeats"] == 15
        assert manifest["resolved_config"]["alpha"] == 0.2
        assert manifest["command"] == "study"

    def test_figures_rendered(self, tmp_path, capsys):
        out = self._study(tmp_path, "study3")
        capsys.readouterr()
        assert (out / "dispersion_c1.png").stat().st_size > 0
        assert (out / "required_n.png").exists()
        assert (out / "sample_vs_population.png").exists()
        assert (out / "single_draw.png").exists()

    def test_rerun_with_manifest_argv_is_byte_identical(self, tmp_path, capsys):
        out = self._study(tmp_path, "study4", extra=["--no-figures"])
        capsys.readouterr()
        manifest = manifest_of(out)
        replay_argv = [
            str(tmp_path / "study_replay") if part == str(out) else part
            for part in manifest["argv"]
        ]
        assert run(replay_argv) == 0
        capsys.readouterr()
        replay_manifest = manifest_of(tmp_path / "study_replay")
        assert manifest["outputs"] == replay_manifest["outputs"]

    def test_thread_flag_does_not_change_outputs(self, tmp_path, capsys):
        out = self._study(tmp_path, "study5", extra=["--no-figures"])
        data = synth_dir(tmp_path, k=12, seed=5)
        threaded = tmp_path / "study5_threads"
        code = run(["study", "--model", "linear1", "--data", str(data / "data.csv"),
                    "--normalization", "none", "--repeats", "15",
                    "--master-seed", "9", *FAST, "--out", str(threaded),
                    "--threads", "4", "--no-figures"])
        assert code == 0
        capsys.readouterr()
        assert manifest_of(out)["outputs"] == manifest_of(threaded)["outputs"]


class TestTruncate:
    def test_knee_dataset_truncated(self, tmp_path, capsys):
        data = synth_dir(tmp_path, model="linexp", k=8, seed=4,
                         extra=["--noise", "0.05"])
        out = tmp_path / "trunc"
        code = run(["truncate", "--data", str(data / "data.csv"),
                    "--out", str(out)])
        assert code == 0
        capsys.readouterr()
        truth = json.loads((data / "truth.json").read_text())
        rows = list(csv.DictReader((out / "pre_knee.csv").open()))
        max_time = {}
        for row in rows:
            cell = row["cell_id"]
            max_time[cell] = max(max_time.get(cell, 0.0), float(row["time"]))
        for cell, theta in truth["theta"].items():
            if cell in max_time:
                t_f, tau = theta[1], theta[2]
                # fitted knees track the truth within a few time units
                assert max_time[cell] <= t_f - 2 * tau + 25.0

    def test_linear_dataset_unchanged(self, tmp_path, capsys):
        data = synth_dir(tmp_path, model="linear1", k=6, seed=6)
        out = tmp_path / "trunc_lin"
        code = run(["truncate", "--data", str(data / "data.csv"),
                    "--out", str(out)])
        assert code == 0
        capsys.readouterr()
        source = (data / "data.csv").read_text()
        result = (out / "pre_knee.csv").read_text()
        assert sorted(source.strip().splitlines()) == sorted(result.strip().splitlines())

    def test_empty_result_is_error(self, tmp_path, capsys):
        # knees before the second check-up drop every trace
        data = synth_dir(tmp_path, model="linexp", k=6, seed=8,
                         extra=["--mu-star", "-0.005,30,5", "--sigma-star",
                                "0.0001,1,0.5", "--noise", "0.01"])
        out = tmp_path / "trunc_empty"
        code = run(["truncate", "--data", str(data / "data.csv"),
                    "--out", str(out)])
        assert code == 1
        record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert "every trace" in record["message"]


class TestManifest:
    def test_exactly_one_manifest_with_hashes(self, tmp_path):
        out = synth_dir(tmp_path, k=5, seed=15)
        manifests = list(out.rglob("manifest.json"))
        assert len(manifests) == 1
        manifest = manifest_of(out)
        assert set(manifest["outputs"]) == {"data.csv", "truth.json"}
        assert manifest["version"]

    def test_synth_rerun_identical(self, tmp_path):
        a = synth_dir(tmp_path, k=6, seed=21)
        b_dir = tmp_path / "again"
        code = run(["synth", "--model", "linear1", "--k", "6", "--seed", "21",
                    "--out", str(b_dir)])
        assert code == 0
        assert manifest_of(a)["outputs"] == manifest_of(b_dir)["outputs"]

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run(["--version"])
        assert exc.value.code == 0
