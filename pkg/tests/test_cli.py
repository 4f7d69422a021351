import json

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from defectloop.cli import main
from defectloop.storage import DataStore


@pytest.fixture
def runner():
    return CliRunner()


def write_png(path, array):
    Image.fromarray(array.astype(np.uint8)).save(path)


def make_run_dir(tmp_path, rng):
    run_dir = tmp_path / "run-07"
    run_dir.mkdir()
    for k in range(16):
        t = k * 60
        value = rng.integers(60, 200)
        frame = np.full((48, 64), value, dtype=np.uint8)
        write_png(run_dir / f"frame_{t:06d}.png", frame)
    # one blacked-out frame inside the second window
    write_png(run_dir / "frame_000930.png", np.zeros((48, 64), dtype=np.uint8))
    return run_dir


class TestIngestPreprocess:
    def test_ingest_writes_run_manifest(self, tmp_path, rng, runner):
        run_dir = make_run_dir(tmp_path, rng)
        data_root = tmp_path / "data"
        result = runner.invoke(
            main,
            ["ingest", "--run-dir", str(run_dir), "--window-s", "900",
             "--data-root", str(data_root)],
        )
        assert result.exit_code == 0, result.output
        manifest_path = data_root / "runs" / "run-07.json"
        doc = json.loads(manifest_path.read_text())
        assert doc["growth_run_id"] == "run-07"
        # 0..900s span resamples to two windows; the 930s black frame is
        # in window 1 but arrives after frame 900, so it is not sampled
        statuses = {f["image_id"]: f["status"] for f in doc["frames"]}
        assert len(statuses) == 2
        assert set(statuses.values()) == {"filtered"}

    def test_ingest_then_preprocess(self, tmp_path, rng, runner):
        run_dir = make_run_dir(tmp_path, rng)
        data_root = tmp_path / "data"
        assert runner.invoke(
            main,
            ["ingest", "--run-dir", str(run_dir), "--window-s", "60",
             "--data-root", str(data_root)],
        ).exit_code == 0
        result = runner.invoke(
            main,
            ["preprocess", "--data-root", str(data_root), "--resolution", "256",
             "--pool", "16", "--split", "0.9", "--seed", "3"],
        )
        assert result.exit_code == 0, result.output
        store = DataStore(data_root)
        manifest = store.load_manifest()
        assert manifest.split_seed == 3
        ids = manifest.image_ids()
        assert len(ids) >= 10
        image = store.load_image(ids[0], 256)
        assert image.shape == (256, 256)
        assert image.min() >= 0.0 and image.max() <= 1.0


class TestSynthGridReport:
    @pytest.fixture
    def synth_root(self, tmp_path, runner):
        data_root = tmp_path / "data"
        result = runner.invoke(
            main,
            ["synth", "--data-root", str(data_root), "--images", "10",
             "--resolution", "256", "--seed", "5"],
        )
        assert result.exit_code == 0, result.output
        return data_root

    def test_grid_and_report_figures(self, synth_root, runner):
        result = runner.invoke(
            main,
            ["grid", "--data-root", str(synth_root), "--resolutions", "256",
             "--rates", "1,2", "--seed", "1"],
        )
        assert result.exit_code == 0, result.output
        csv_path = synth_root / "reports" / "grid_report.csv"
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "dataset_size,resolution,center_map,poly_miou,edge_map,mean"
        assert len(lines) == 3

        report = runner.invoke(main, ["report", "--data-root", str(synth_root)])
        assert report.exit_code == 0, report.output
        figures = sorted((synth_root / "reports" / "figures").glob("*.png"))
        assert [f.name for f in figures] == [
            "grid_mean_accuracy.png",
            "grid_per_class.png",
        ]
        for figure in figures:
            assert figure.stat().st_size > 0

    def test_train_evaluate_select(self, synth_root, runner):
        result = runner.invoke(
            main,
            ["train", "--data-root", str(synth_root), "--resolution", "256",
             "--model-id", "cli-model"],
        )
        assert result.exit_code == 0, result.output
        assert "cli-model v1" in result.output

        result = runner.invoke(
            main,
            ["evaluate", "--data-root", str(synth_root), "--model-id", "cli-model",
             "--resolution", "256"],
        )
        assert result.exit_code == 0, result.output
        doc = json.loads((synth_root / "reports" / "evaluation.json").read_text())
        assert 0.0 <= doc["mean_accuracy"] <= 1.0

        out_path = synth_root / "batch.json"
        result = runner.invoke(
            main,
            ["select", "--data-root", str(synth_root), "--model", "cli-model",
             "--resolution", "256", "--k", "4", "--out", str(out_path)],
        )
        assert result.exit_code == 0, result.output
        chosen = json.loads(out_path.read_text())
        assert len(chosen["image_ids"]) == 4

    def test_augment_command_expands_manifest(self, synth_root, runner):
        store = DataStore(synth_root)
        before = store.load_manifest()
        train_originals = [
            e for e in before.entries_at(256)
            if before.split[e.image_id].value == "train"
        ]
        result = runner.invoke(
            main,
            ["augment", "--data-root", str(synth_root), "--rate", "2",
             "--seed", "4", "--resolution", "256"],
        )
        assert result.exit_code == 0, result.output
        after = store.load_manifest()
        augmented = [e for e in after.entries_at(256) if not e.is_original]
        assert len(augmented) == len(train_originals)
        assert (synth_root / "reports" / "transform_log.json").exists()
