"""CLI surface: subcommands, exit codes, output artifacts, idempotence."""

import json
import subprocess
import sys

import numpy as np
import pytest

from itlm.cli import EXIT_CONFIG, EXIT_MISSING_INPUT, EXIT_OK, main
from itlm.grids import read_rgrd

SMALL_CONFIG = {
    "grid": {"lat_north": 40.0, "lon_west": 100.0, "dlat": 0.05, "dlon": 0.05,
             "nrows": 64, "ncols": 64},
    "scenegen": {"seed": 5, "n_scenes": 2, "test_seed": 900, "n_test_scenes": 1},
    "tiles": {"size": 32, "train_stride": 32, "infer_stride": 32},
    "train": {"epochs": 1, "finetune_epochs": 1, "clp_batch_size": 4,
              "prop_batch_size": 4, "min_labeled_fraction": 0.05},
    "rf": {"n_estimators": 3, "max_depth": 6, "sample_n": 2000},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg_path = d / "config.json"
    cfg_path.write_text(json.dumps(SMALL_CONFIG))
    return d, cfg_path


@pytest.fixture(scope="module")
def synthed(workdir):
    d, cfg = workdir
    out = d / "run"
    assert main(["synth", "--config", str(cfg), "--out", str(out), "--threads", "1"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(workdir, synthed):
    d, cfg = workdir
    rc = main(["train", "--config", str(cfg), "--out", str(synthed),
               "--stage", "suite", "--with-rf", "--threads", "1"])
    assert rc == EXIT_OK
    return synthed


@pytest.fixture(scope="module")
def inferred(workdir, trained):
    d, cfg = workdir
    scene = trained / "scenes" / "test" / "scene_000"
    out = trained / "pred" / "scene_000"
    rc = main(["infer", "--config", str(cfg), "--out", str(out),
               "--weights", str(trained / "weights"), "--scene", str(scene),
               "--with-rf", "--threads", "1"])
    assert rc == EXIT_OK
    return out


class TestExitCodes:
    def test_missing_config_file(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_MISSING_INPUT

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert main(["synth", "--config", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_unknown_config_key(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"grid": {"rows": 5}}))
        assert main(["synth", "--config", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_unknown_section(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"gridz": {}}))
        assert main(["synth", "--config", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_infer_missing_scene(self, workdir, trained):
        d, cfg = workdir
        rc = main(["infer", "--config", str(cfg), "--out", str(d / "x"),
                   "--weights", str(trained / "weights"), "--scene", str(d / "absent")])
        assert rc == EXIT_MISSING_INPUT

    def test_infer_missing_weights(self, workdir, synthed):
        d, cfg = workdir
        scene = synthed / "scenes" / "test" / "scene_000"
        rc = main(["infer", "--config", str(cfg), "--out", str(d / "x"),
                   "--weights", str(d / "nothing"), "--scene", str(scene)])
        assert rc == EXIT_MISSING_INPUT

    def test_module_entrypoint_help(self):
        res = subprocess.run(
            [sys.executable, "-m", "itlm.cli", "--help"], capture_output=True, text=True
        )
        assert res.returncode == 0
        for cmd in ("synth", "train", "infer", "eval", "climo"):
            assert cmd in res.stdout


class TestSynth:
    def test_layout(self, synthed):
        scenes = synthed / "scenes"
        assert (scenes / "manifest.json").exists()
        assert (scenes / "dem.rgrd").exists()
        assert (scenes / "train" / "scene_000" / "manifest.json").exists()
        assert (scenes / "train" / "scene_001" / "stack_bt_10.8.rgrd").exists()
        assert (scenes / "test" / "scene_000" / "truth_clp.rgrd").exists()

    def test_rerun_same_config_ok(self, workdir, synthed):
        d, cfg = workdir
        assert main(["synth", "--config", str(cfg), "--out", str(synthed)]) == EXIT_OK

    def test_conflicting_config_requires_force(self, workdir, synthed):
        d, cfg = workdir
        other = dict(SMALL_CONFIG)
        other["scenegen"] = dict(SMALL_CONFIG["scenegen"], seed=99)
        p = d / "other.json"
        p.write_text(json.dumps(other))
        assert main(["synth", "--config", str(p), "--out", str(synthed)]) == EXIT_CONFIG
        assert main(["synth", "--config", str(p), "--out", str(synthed), "--force"]) == EXIT_OK
        # restore the original scenes for downstream fixtures
        assert main(["synth", "--config", str(cfg), "--out", str(synthed), "--force"]) == EXIT_OK


class TestTrain:
    def test_artifacts(self, trained):
        for d in ("weights_pretrained", "weights"):
            for var in ("clp", "cth", "cer", "cot"):
                assert (trained / d / f"{var}.itlm").exists()
        assert (trained / "loss_curves_suite.csv").exists()
        header = (trained / "loss_curves_suite.csv").read_text().splitlines()[0]
        assert header == "phase,epoch,loss"

    def test_forests_written(self, trained):
        for var in ("clp", "cth", "cer", "cot"):
            assert (trained / "forests" / f"{var}.json").exists()


class TestInfer:
    def test_prediction_rasters(self, inferred):
        for model in ("itlm", "rf"):
            for var in ("clp", "cth", "cer", "cot", "coverage"):
                r = read_rgrd(inferred / model / f"pred_{var}.rgrd")
                assert r.values.shape == (64, 64)
            assert (inferred / model / "pred_manifest.json").exists()

    def test_clp_codes(self, inferred):
        clp = read_rgrd(inferred / "itlm" / "pred_clp.rgrd")
        assert set(np.unique(clp.values)) <= {0.0, 1.0, 2.0}

    def test_timing_report(self, inferred):
        timing = json.loads((inferred / "timing.json").read_text())
        assert timing["itlm_s"] > 0
        assert timing["rf_s"] > 0
        assert timing["ratio_rf_over_itlm"] == pytest.approx(timing["rf_s"] / timing["itlm_s"])


class TestEval:
    @pytest.mark.parametrize("reference", ["truth", "target"])
    def test_labelset_references(self, workdir, trained, inferred, reference):
        d, cfg = workdir
        scene = trained / "scenes" / "test" / "scene_000"
        out = d / f"eval_{reference}"
        rc = main(["eval", "--config", str(cfg), "--out", str(out),
                   "--pred", str(inferred / "itlm"), "--scene", str(scene),
                   "--reference", reference])
        assert rc == EXIT_OK
        doc = json.loads((out / "report.json").read_text())
        assert set(doc["cth"]) == {"n", "oa_pct", "r", "mae", "mbe", "rmse"}
        assert doc["clp"]["n"] > 0
        lines = (out / "report.csv").read_text().splitlines()
        assert lines[0] == "variable,n,oa_pct,r,mae,mbe,rmse"

    def test_track_reference(self, workdir, trained, inferred):
        d, cfg = workdir
        scene = trained / "scenes" / "test" / "scene_000"
        out = d / "eval_track"
        rc = main(["eval", "--config", str(cfg), "--out", str(out),
                   "--pred", str(inferred / "itlm"), "--scene", str(scene),
                   "--reference", "track"])
        assert rc == EXIT_OK
        doc = json.loads((out / "report.json").read_text())
        assert doc["n_pairs"] > 0
        lines = (out / "stratified.csv").read_text().splitlines()
        assert lines[0].startswith("daynight,season,")

    def test_missing_pred_dir(self, workdir, trained):
        d, cfg = workdir
        scene = trained / "scenes" / "test" / "scene_000"
        rc = main(["eval", "--config", str(cfg), "--out", str(d / "x"),
                   "--pred", str(d / "absent"), "--scene", str(scene)])
        assert rc == EXIT_MISSING_INPUT


class TestClimo:
    def test_products(self, workdir, trained, inferred):
        d, cfg = workdir
        out = d / "climo"
        rc = main(["climo", "--config", str(cfg), "--out", str(out),
                   "--pred-root", str(trained / "pred"),
                   "--dem", str(trained / "scenes" / "dem.rgrd")])
        assert rc == EXIT_OK
        for name in ("tcf", "wcf", "icf", "mean_cth", "mean_cer", "mean_cot"):
            assert (out / f"{name}.rgrd").exists()
            assert (out / f"{name}.pgm").exists()
        tcf = read_rgrd(out / "tcf.rgrd")
        wcf = read_rgrd(out / "wcf.rgrd")
        icf = read_rgrd(out / "icf.rgrd")
        ok = tcf.valid
        assert np.all(np.abs(tcf.values[ok] - (wcf.values[ok] + icf.values[ok])) <= 1e-9)
        assert (out / "diurnal.csv").exists()
        assert (out / "diurnal_deep_convective.csv").exists()

    def test_empty_root_is_missing_input(self, workdir, tmp_path):
        d, cfg = workdir
        empty = tmp_path / "empty"
        empty.mkdir()
        rc = main(["climo", "--config", str(cfg), "--out", str(d / "x"),
                   "--pred-root", str(empty)])
        assert rc == EXIT_MISSING_INPUT


class TestLogging:
    def test_log_env_var(self, workdir, tmp_path, monkeypatch):
        d, cfg = workdir
        monkeypatch.setenv("ITLM_LOG", "debug")
        out = tmp_path / "synth_dbg"
        assert main(["synth", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
