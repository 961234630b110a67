import json

import numpy as np
import pytest

from dtsdf import __version__
from dtsdf.cli import main
from dtsdf.io import read_trajectory, write_trajectory
from dtsdf.evaluation import Trajectory
from dtsdf.geometry import se3_exp

FAST = ["--voxel-size", "0.04", "--max-frames", "6"]


def _tiny_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"synthetic": {"frames": 6, "intrinsics": {"fx": 40.0, "fy": 40.0, "cx": 19.5, "cy": 14.5, "width": 40, "height": 30}}}))
    return str(cfg)


def test_track_writes_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["track", "--config", _tiny_config(tmp_path), "--out", str(out), "--save-volume", *FAST])
    assert code == 0
    for name in ("config.json", "trajectory.txt", "reports.jsonl", "groundtruth.txt", "stats.json", "stats.txt", "volume.dtsdf"):
        assert (out / name).is_file(), name
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["voxel_size"] == 0.04 and echoed["max_frames"] == 6
    assert len(read_trajectory(out / "trajectory.txt")) == 6
    lines = (out / "reports.jsonl").read_text().splitlines()
    assert len(lines) == 6 and json.loads(lines[1])["frame_index"] == 1
    assert "tracked 6 frames" in capsys.readouterr().out

    assert main(["eval", "--est", str(out / "trajectory.txt"), "--gt", str(out / "groundtruth.txt"), "--window", "2", "--out", str(tmp_path / "ev")]) == 0
    assert main(["info", "--volume", str(out / "volume.dtsdf")]) == 0
    assert main(["render", "--volume", str(out / "volume.dtsdf"), "--trajectory", str(out / "trajectory.txt"), "--index", "3", "--out", str(tmp_path / "r")]) == 0
    assert any((tmp_path / "r").iterdir())


def test_track_is_deterministic(tmp_path):
    cfg = _tiny_config(tmp_path)
    outs = []
    for name, workers in (("a", "1"), ("b", "3")):
        assert main(["track", "--config", cfg, "--out", str(tmp_path / name), "--workers", workers, *FAST]) == 0
        outs.append((tmp_path / name / "trajectory.txt").read_bytes())
    assert outs[0] == outs[1]


def test_sim3_command(tmp_path):
    out = tmp_path / "s"
    assert main(["sim3", "--config", _tiny_config(tmp_path), "--out", str(out), "--factors", "1.0,1.05", *FAST]) == 0
    assert (out / "scale_series.txt").is_file()
    summary = json.loads((out / "scales.json").read_text())
    assert summary["anchor"] == 0


def test_exit_codes(tmp_path, capsys):
    assert main(["bogus"]) == 1
    assert main([]) == 1
    assert main(["track", "--voxel-size", "abc"]) == 1
    assert main(["track", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert main(["sim3", "--factors", "1.0,-2", "--out", str(tmp_path / "o")]) == 1
    bad = tmp_path / "bad.txt"
    bad.write_text("1.0 2.0\n")
    assert main(["eval", "--est", str(bad), "--gt", str(bad)]) == 2
    short = tmp_path / "short.txt"
    write_trajectory(Trajectory([0.0, 1.0, 2.0], [se3_exp(np.zeros(6))] * 3), short)
    assert main(["eval", "--est", str(short), "--gt", str(short), "--window", "30"]) == 2
    bad_cfg = tmp_path / "c.json"
    bad_cfg.write_text(json.dumps({"voxel_sise": 0.01}))
    # an unusable config is a usage error, not a data error
    assert main(["track", "--config", str(bad_cfg)]) == 1


def test_info_prints_version(capsys):
    assert main(["info"]) == 0
    assert __version__ in capsys.readouterr().out
