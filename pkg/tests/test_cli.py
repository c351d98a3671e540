import json

import numpy as np
import pytest

from sthash.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny dataset plus a short training run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli_ws")
    ds_dir = root / "ds"
    run_dir = root / "run"
    assert main([
        "synth", "--out", str(ds_dir), "--width", "16", "--height", "16",
        "--times", "2", "--train-cams", "1", "--test-cams", "1",
        "--oracle-samples", "64",
    ]) == 0
    assert main([
        "train", "--data", str(ds_dir), "--out", str(run_dir),
        "--set", "steps=3", "--set", "batch_rays=16", "--set", "n_samples=8",
        "--set", "n_coarse=4", "--set", "levels=2", "--set", "base_resolution=4",
        "--set", "max_resolution=8",
        "--set", "log2_table_size_3d=8", "--set", "log2_table_size_4d=8",
        "--set", "time_max_resolution=2", "--set", "mask_resolution=4",
        "--set", "uncertainty_resolution=4", "--set", "hidden_dim=8",
        "--set", "geo_features=7", "--set", "sh_degree=2",
        "--set", "proposal_resolution=4", "--set", "mine_batch=16",
        "--set", "mine_hidden=8", "--set", "log_every=1",
    ]) == 0
    return ds_dir, run_dir


class TestSynthTrain:
    def test_outputs_exist(self, workspace):
        ds_dir, run_dir = workspace
        assert (ds_dir / "scene.json").exists()
        assert (ds_dir / "cam0" / "0000.png").exists()
        assert (run_dir / "checkpoint.msth").exists()
        assert (run_dir / "metrics.ndjson").exists()

    def test_resolved_config_dumped_with_provenance(self, workspace):
        _, run_dir = workspace
        dump = json.loads((run_dir / "config_resolved.json").read_text())
        assert dump["steps"]["value"] == 3
        assert "provenance" in dump["gamma"]

    def test_metrics_are_ndjson(self, workspace):
        _, run_dir = workspace
        lines = (run_dir / "metrics.ndjson").read_text().splitlines()
        assert len(lines) == 3
        rec = json.loads(lines[-1])
        assert rec["step"] == 3 and "total" in rec


class TestEvalRender:
    def test_eval_reports_metrics(self, workspace, capsys):
        ds_dir, run_dir = workspace
        code, out, _ = run_cli(
            capsys, "eval", "--checkpoint", str(run_dir / "checkpoint.msth"),
            "--data", str(ds_dir), "--frame-stride", "2",
        )
        assert code == 0
        report = json.loads(out)
        assert "psnr" in report and "d_ssim" in report
        assert "dynamic_fraction" in report

    def test_render_writes_frames(self, workspace, capsys, tmp_path):
        ds_dir, run_dir = workspace
        out_dir = tmp_path / "frames"
        code, out, _ = run_cli(
            capsys, "render", "--checkpoint", str(run_dir / "checkpoint.msth"),
            "--data", str(ds_dir), "--out", str(out_dir), "--camera", "1",
        )
        assert code == 0
        assert (out_dir / "0000.png").exists() and (out_dir / "0001.png").exists()

    def test_render_incremental_reports_speedup(self, workspace, capsys, tmp_path):
        ds_dir, run_dir = workspace
        out_dir = tmp_path / "inc"
        code, out, _ = run_cli(
            capsys, "render", "--checkpoint", str(run_dir / "checkpoint.msth"),
            "--data", str(ds_dir), "--out", str(out_dir), "--incremental",
            "--epsilon", "0.1",
        )
        assert code == 0
        stats = json.loads(out)
        assert "speedup" in stats and stats["speedup"] >= 1.0
        assert (out_dir / "dynamic_pixels.png").exists()


class TestDiagnostics:
    def test_collision_stats(self, capsys):
        code, out, _ = run_cli(
            capsys, "collision-stats", "--dims", "4", "--levels", "2",
            "--log2-table-size", "12", "--base-resolution", "8",
            "--max-resolution", "64", "--time-max-resolution", "8",
            "--n-keys", "10000",
        )
        assert code == 0
        report = json.loads(out)
        assert "level_0" in report and "occupied_fraction" in report["level_0"]

    def test_mine_sanity(self, capsys):
        code, out, _ = run_cli(
            capsys, "mine-sanity", "--steps", "50", "--batch", "64",
            "--hidden", "16", "--eval-batches", "5",
        )
        assert code == 0
        report = json.loads(out)
        assert abs(report["closed_form"] - 0.8304) < 1e-3


class TestErrors:
    def test_missing_dataset_json_error(self, capsys, tmp_path):
        code, out, err = run_cli(
            capsys, "eval", "--checkpoint", str(tmp_path / "no.msth"),
            "--data", str(tmp_path / "nodata"),
        )
        assert code == 1
        blob = json.loads(err.strip())
        assert blob["error"] == "FileNotFoundError"
        assert "message" in blob

    def test_bad_config_override_json_error(self, workspace, capsys, tmp_path):
        ds_dir, _ = workspace
        code, _, err = run_cli(
            capsys, "train", "--data", str(ds_dir), "--out", str(tmp_path / "x"),
            "--set", "not_a_key=1",
        )
        assert code == 1
        blob = json.loads(err.strip())
        assert blob["error"] == "ValueError"
        assert "not_a_key" in blob["message"]
