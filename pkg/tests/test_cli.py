import json
import subprocess
import sys
import time

import pytest

from semfov.calibration import CalibrationModel
from semfov.cli import main
from semfov.simworld import GroundTruthObject, SceneSpec
from semfov.semantic_map import BoundingBox


def run(*argv):
    return main([str(a) for a in argv])


class TestParsing:
    def test_help(self):
        proc = subprocess.run([sys.executable, "-m", "semfov", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        for cmd in ("gen-scenes", "gen-train", "fit-calib", "run-search", "run-explore", "report"):
            assert cmd in proc.stdout

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run("gen-scenes", "--count", 1, "--out", "x", "--colour", "red")
        assert exc.value.code != 0
        assert "usage:" in capsys.readouterr().err

    @pytest.mark.parametrize("argv", [["gen-scenes", "--count", "-1", "--out", "x"], ["gen-scenes", "--count", "1", "--canvas", "640", "--out", "x"]])
    def test_invalid_values_rejected_before_work(self, tmp_path, argv):
        with pytest.raises(SystemExit) as exc:
            run(*[a.replace("x", str(tmp_path / "x")) if a == "x" else a for a in argv])
        assert exc.value.code == 1
        assert not (tmp_path / "x").exists()


class TestGenScenes:
    def test_zero_count(self, tmp_path):
        assert run("gen-scenes", "--count", 0, "--out", tmp_path) == 0
        assert [p.name for p in tmp_path.iterdir()] == ["manifest.json"]

    def test_same_seed_identical(self, tmp_path):
        run("gen-scenes", "--count", 5, "--seed", 3, "--out", tmp_path / "a")
        run("gen-scenes", "--count", 5, "--seed", 3, "--out", tmp_path / "b")
        run("gen-scenes", "--count", 5, "--seed", 4, "--out", tmp_path / "c")
        a = sorted((tmp_path / "a").iterdir())
        assert len(a) == 6
        for p in a:
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
        assert (tmp_path / "a" / "scene_0000.json").read_bytes() != (tmp_path / "c" / "scene_0000.json").read_bytes()

    def test_validation_size_is_fast(self, tmp_path):
        t0 = time.perf_counter()
        assert run("gen-scenes", "--count", 300, "--canvas", "640x480", "--out", tmp_path) == 0
        assert time.perf_counter() - t0 < 10
        assert len(list(tmp_path.glob("scene_*.json"))) == 300

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert run("gen-scenes", "--count", 1, "--out", blocker / "sub") == 1


class TestFitCalib:
    def test_emulate_bit_identical(self, tmp_path, capsys):
        for name in ("a.json", "b.json"):
            assert run("fit-calib", "--emulate", 5000, "--classes", 2, "--out", tmp_path / name) == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        model = CalibrationModel.load(tmp_path / "a.json")
        assert model.num_classes == 2
        assert "wrote calibration model" in capsys.readouterr().out

    def test_from_records(self, tmp_path):
        assert run("gen-train", "--count", 3000, "--classes", 2, "--out", tmp_path / "r.jsonl") == 0
        assert run("fit-calib", "--records", tmp_path / "r.jsonl", "--out", tmp_path / "m.json") == 0
        assert CalibrationModel.load(tmp_path / "m.json").num_classes == 2

    def test_empty_records(self, tmp_path, capsys):
        (tmp_path / "r.jsonl").write_text("")
        assert run("fit-calib", "--records", tmp_path / "r.jsonl", "--out", tmp_path / "m.json") == 1
        assert "no training records" in capsys.readouterr().err
        assert not (tmp_path / "m.json").exists()

    def test_bad_record_names_location(self, tmp_path, capsys):
        (tmp_path / "r.jsonl").write_text('{"scores": [0.5, 0.5], "class": 0, "distance": 0.1}\n{"scores": [1]}\n')
        assert run("fit-calib", "--records", tmp_path / "r.jsonl", "--out", tmp_path / "m.json") == 1
        assert ":2" in capsys.readouterr().err

    def test_bins_mismatch(self, tmp_path):
        assert run("fit-calib", "--emulate", 100, "--bins", 3, "--out", tmp_path / "m.json") == 1


def write_config(tmp_path, **kw):
    data = dict(
        kind="search",
        policies=[{"kind": "random"}, {"kind": "search_nonpredictive"}],
        num_classes=2,
        num_scenes=3,
        horizon=30,
        repetitions=2,
        seed=5,
    )
    data.update(kw)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return path


class TestCampaigns:
    def test_run_search_and_report(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert run("run-search", "--config", cfg, "--out", tmp_path / "out") == 0
        assert sorted(p.name for p in (tmp_path / "out").iterdir()) == [
            "manifest.json", "random_raw.csv", "search_nonpredictive_raw.csv", "timing.json",
        ]
        capsys.readouterr()
        assert run("report", "--in", tmp_path / "out", "--format", "csv") == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].startswith("policy,mean_cp@5") and len(lines) == 3
        assert run("report", "--in", tmp_path / "out", "--format", "json") == 0
        assert len(json.loads(capsys.readouterr().out)) == 2

    def test_jobs_and_seed_override(self, tmp_path):
        cfg = write_config(tmp_path)
        run("run-search", "--config", cfg, "--out", tmp_path / "a")
        run("run-search", "--config", cfg, "--jobs", 2, "--out", tmp_path / "b")
        run("run-search", "--config", cfg, "--seed", 6, "--out", tmp_path / "c")
        a = (tmp_path / "a" / "random_raw.csv").read_bytes()
        assert a == (tmp_path / "b" / "random_raw.csv").read_bytes()
        assert a != (tmp_path / "c" / "random_raw.csv").read_bytes()

    def test_kind_mismatch(self, tmp_path):
        assert run("run-explore", "--config", write_config(tmp_path), "--out", tmp_path / "o") == 1

    def test_missing_model(self, tmp_path, capsys):
        cfg = write_config(tmp_path, policies=[{"kind": "search_predictive", "calibrated": True}])
        assert run("run-search", "--config", cfg, "--out", tmp_path / "o") == 1
        assert "calibration" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_trial_error_exit_code(self, tmp_path):
        scenes = tmp_path / "scenes"
        scenes.mkdir()
        # the target covers every cell, so no valid start fixation exists
        SceneSpec(100, 100, [GroundTruthObject(1, BoundingBox(0, 0, 100, 100))], target=1).save(scenes / "s.json")
        cfg = write_config(tmp_path, scenes="scenes", grid=[2, 2])
        assert run("run-search", "--config", cfg, "--out", tmp_path / "o") == 2

    def test_missing_config(self, tmp_path):
        assert run("run-search", "--config", tmp_path / "nope.json", "--out", tmp_path / "o") == 1

    def test_report_empty_dir(self, tmp_path):
        assert run("report", "--in", tmp_path) == 1
