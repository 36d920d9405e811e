import json
from pathlib import Path

import numpy as np
import pytest

from dvps import formats
from dvps.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, resolve_config
from dvps.errors import ConfigError
from dvps.model import load_model

SMALL = {
    "seed": 3,
    "videos": 2,
    "scene": {"T": 4, "H": 16, "W": 16, "things_min": 2, "things_max": 2, "size_min": 3, "size_max": 5,
              "distractors": 1, "embed_dim": 16, "mask_dim": 8, "sigma": 0.3},
    "model": {"embed_dim": 16, "heads": 2, "mask_dim": 8, "tracker_layers": 1, "refiner_layers": 1,
              "ffn_mult": 1, "kernel_size": 3},
    "tracker_train": {"max_iter": 3, "batch_size": 2, "clip_len": 3},
    "refiner_train": {"max_iter": 2, "batch_size": 2, "clip_len": 4},
}


def _files(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "run.log"}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == EXIT_OK
    assert main(["train-tracker", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "trk")]) == 0
    assert main(["train-refiner", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "ref"),
                 "--tracker", str(root / "trk" / "tracker.ckpt")]) == 0
    return root, cfg


class TestConfig:
    def test_invalid_key_named(self):
        with pytest.raises(ConfigError, match="scene.colour"):
            resolve_config(None, ["scene.colour=1"])

    def test_override_parsed_as_json(self):
        cfg = resolve_config(None, ["scene.sigma=0.25", "infer.scales=[64,96]"])
        assert cfg["scene"]["sigma"] == 0.25 and cfg["infer"]["scales"] == [64, 96]

    def test_invalid_key_exit_code(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path), "--set", "scene.colour=1"]) == EXIT_USAGE
        assert "scene.colour" in capsys.readouterr().err

    def test_echo(self, tmp_path, capsys):
        main(["gen-data", "--out", str(tmp_path), "--set", "videos=0", "--set", "seed=11"])
        err = capsys.readouterr().err
        assert "seed: 11" in err and "resolved config" in err

    def test_bad_usage(self, capsys):
        assert main(["infer"]) == EXIT_USAGE


class TestGenData:
    def test_layout_and_determinism(self, work, tmp_path):
        root, cfg = work
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
        assert _files(root / "data") == _files(tmp_path / "again")
        manifest = json.loads((root / "data" / "manifest.json").read_text())
        assert len(manifest["videos"]) == 2 and all("seed" in v for v in manifest["videos"])

    def test_single_frame_videos(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--set", "videos=1", "--set", "scene.T=1",
                     "--set", "scene.H=16", "--set", "scene.W=16"]) == 0
        assert formats.load_annotation(tmp_path / "video0000" / "gt.json").T == 1


class TestTraining:
    def test_missing_tracker(self, work, tmp_path, capsys):
        root, cfg = work
        code = main(["train-refiner", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path),
                     "--tracker", str(tmp_path / "nope.ckpt")])
        assert code == EXIT_DATA and "tracker checkpoint" in capsys.readouterr().err

    def test_zero_iterations_checkpoint(self, work, tmp_path):
        root, cfg = work
        assert main(["train-tracker", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path),
                     "--set", "tracker_train.max_iter=0"]) == 0
        params, model, _ = load_model(tmp_path / "tracker.ckpt", "tracker")
        assert model.embed_dim == 16 and params
        assert (tmp_path / "tracker_loss.csv").read_text() == "iteration,loss,lr\n"

    def test_loss_csv(self, work):
        root, _ = work
        lines = (root / "trk" / "tracker_loss.csv").read_text().splitlines()
        assert lines[0] == "iteration,loss,lr" and len(lines) == 4

    def test_resume_matches(self, work, tmp_path):
        root, cfg = work
        base = ["train-tracker", "--config", str(cfg), "--data", str(root / "data")]
        assert main(base + ["--out", str(tmp_path / "a"), "--stop-at", "1"]) == 0
        assert main(base + ["--out", str(tmp_path / "b"), "--resume", str(tmp_path / "a" / "tracker.ckpt")]) == 0
        full, _, _ = load_model(root / "trk" / "tracker.ckpt", "tracker")
        resumed, _, _ = load_model(tmp_path / "b" / "tracker.ckpt", "tracker")
        assert all(np.array_equal(full[k].data, resumed[k].data) for k in full)
        assert (tmp_path / "b" / "tracker.ckpt").read_bytes() == (root / "trk" / "tracker.ckpt").read_bytes()

    def test_repeat_byte_identical(self, work, tmp_path):
        root, cfg = work
        assert main(["train-tracker", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path)]) == 0
        assert _files(tmp_path) == _files(root / "trk")


class TestInfer:
    def test_prematch_zero_noise_is_perfect(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path / "d"), "--set", "videos=2", "--set", "scene.sigma=0.0",
                     "--set", "scene.T=6", "--set", "scene.H=32", "--set", "scene.W=32"]) == 0
        assert main(["infer", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "p"), "--stage", "prematch"]) == 0
        capsys.readouterr()
        assert main(["eval", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "d"),
                     "--out", str(tmp_path / "r")]) == 0
        report = json.loads((tmp_path / "r" / "report.json").read_text())
        assert all(v == 100.0 for v in report["vpq_per_k"].values())
        assert report["stq"] == 1.0 and report["association_accuracy"] == 1.0

    def test_one_scale_equals_plain(self, work, tmp_path):
        root, _ = work
        ckpts = ["--tracker", str(root / "trk" / "tracker.ckpt"), "--refiner", str(root / "ref" / "refiner.ckpt")]
        assert main(["infer", "--data", str(root / "data"), "--out", str(tmp_path / "a"), "--stage", "refiner"] + ckpts) == 0
        assert main(["infer", "--data", str(root / "data"), "--out", str(tmp_path / "b"), "--stage", "refiner",
                     "--scales", "16"] + ckpts) == 0
        a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
        assert {k: v for k, v in a.items() if k != "manifest.json"} == {k: v for k, v in b.items() if k != "manifest.json"}

    def test_two_scales_run(self, work, tmp_path):
        root, _ = work
        assert main(["infer", "--data", str(root / "data"), "--out", str(tmp_path), "--stage", "tracker",
                     "--tracker", str(root / "trk" / "tracker.ckpt"), "--scales", "16,24"]) == 0
        pred = formats.load_annotation(tmp_path / "video0000" / "pred.json")
        assert pred.shape == (4, 16, 16)

    def test_stage_checkpoint_mismatch(self, work, tmp_path):
        root, _ = work
        assert main(["infer", "--data", str(root / "data"), "--out", str(tmp_path), "--stage", "refiner",
                     "--tracker", str(root / "trk" / "tracker.ckpt")]) == EXIT_USAGE
        assert main(["infer", "--data", str(root / "data"), "--out", str(tmp_path), "--stage", "prematch",
                     "--tracker", str(root / "trk" / "tracker.ckpt")]) == EXIT_USAGE


class TestEval:
    def test_pred_equals_gt(self, work, tmp_path, capsys):
        root, _ = work
        pred = tmp_path / "pred"
        for v in ("video0000", "video0001"):
            video = formats.load_annotation(root / "data" / v / "gt.json")
            formats.save_annotation(pred / v, "pred", video)
        capsys.readouterr()
        assert main(["eval", "--pred", str(pred), "--gt", str(root / "data")]) == 0
        last = capsys.readouterr().out.splitlines()[-1].split()
        assert last == ["all", "100.0", "100.0", "100.0", "100.0", "100.0", "1.000", "1.000"]

    def test_missing_video_listed(self, work, tmp_path, capsys):
        root, _ = work
        video = formats.load_annotation(root / "data" / "video0000" / "gt.json")
        formats.save_annotation(tmp_path / "video0000", "pred", video)
        assert main(["eval", "--pred", str(tmp_path), "--gt", str(root / "data")]) == EXIT_DATA
        assert "video0001" in capsys.readouterr().err

    def test_fixture_mean_column(self, tmp_path, capsys):
        fixture = {"vpq_per_k": {"1": 52.1, "2": 51.5, "4": 51.2, "6": 51.1}, "stq": 0.5,
                   "association_accuracy": 1.0}
        path = tmp_path / "fixture.json"
        path.write_text(json.dumps(fixture))
        assert main(["eval", "--report", str(path)]) == 0
        header, *_, last = capsys.readouterr().out.splitlines()
        assert header.split()[1:7] == ["VPQ", "VPQ1", "VPQ2", "VPQ4", "VPQ6", "STQ"]
        assert last.split()[2:6] == ["52.1", "51.5", "51.2", "51.1"]
        assert last.split()[1] == "51.4"


class TestViz:
    def _video(self, tmp_path):
        maps = np.zeros((2, 4, 6), dtype=np.int64)
        maps[:, :2, :3] = 1
        maps[:, 2:, 3:] = 2
        from dvps.datamodel import PanopticVideo, Track

        return formats.save_annotation(tmp_path, "ann", PanopticVideo(maps, {1: Track(4, False), 2: Track(0, True)}))

    def test_same_bytes_and_colors(self, tmp_path):
        ann = self._video(tmp_path)
        assert main(["viz", "--video", str(ann), "--out", str(tmp_path / "a")]) == 0
        assert main(["viz", "--video", str(ann), "--out", str(tmp_path / "b")]) == 0
        assert _files(tmp_path / "a") == _files(tmp_path / "b")
        rgb = formats.read_ppm(tmp_path / "a" / "frame_0000.ppm")
        assert len(np.unique(rgb.reshape(-1, 3), axis=0)) == 3
        assert np.all(rgb[0, 5] == 0) and np.all(rgb[3, 0] == 0)

    def test_compare_side_by_side(self, tmp_path):
        ann = self._video(tmp_path)
        assert main(["viz", "--video", str(ann), "--compare", str(ann), "--out", str(tmp_path / "c")]) == 0
        assert formats.read_ppm(tmp_path / "c" / "frame_0001.ppm").shape == (4, 14, 3)


class TestSelfcheck:
    def test_pass(self, capsys):
        assert main(["selfcheck"]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.count("PASS") == 3 and "max error" in out

    def test_injected_fault(self, capsys, monkeypatch):
        assert main(["selfcheck", "--inject-fault", "hungarian"]) == EXIT_NUMERIC
        assert "FAIL  hungarian" in capsys.readouterr().out
        monkeypatch.setenv("DVPS_SELFCHECK_FAULT", "metrics")
        assert main(["selfcheck"]) == EXIT_NUMERIC
