from __future__ import annotations

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from stenosis.cli import RunOptions, UsageError, execute, main, parse_overrides
from stenosis.depth import save_depth

# Small renders need a smaller minimum segment and a wider slab than 320x320.
SMALL = ["--config", "min_segment_pixels=4", "--config", "slab_half_thickness=0.02"]


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom")
    assert main(["render", str(out), "--ratio", "0.5", "--width", "128", "--height", "128", "--write-depth"]) == 0
    return out


def run_args(d, *extra):
    return ["run", str(d / "frames"), "--calib", str(d / "calib.txt"), *SMALL, *extra]


def test_render_outputs(phantom_dir):
    frames = sorted((phantom_dir / "frames").glob("*.png"))
    assert len(frames) == 200 and frames[0].name == "frame_0000.png"
    assert Image.open(frames[0]).size == (128, 128)
    truth = json.loads((phantom_dir / "truth.json").read_text())
    assert truth == {"psa_true": 75.0, "psd_true": 50.0, "keyframe_interval": [100, 199]}
    assert len(list((phantom_dir / "depth").glob("*.depth"))) == 200
    assert "width = 128" in (phantom_dir / "calib.txt").read_text()


def test_run_reports_half_stenosis(phantom_dir, capsys):
    assert main(run_args(phantom_dir)) == 0
    out = capsys.readouterr()
    report = json.loads(out.out)
    assert report["keyframe_index"] == 100
    assert 70 <= report["psa"] <= 80 and 45 <= report["psd"] <= 55
    prov = report["provenance"]
    assert prov["keyframe_source"] == "tracker" and prov["keyframe_reason"] == "IoUBreak"
    assert prov["depth_provider"].startswith("photometric-shading")
    assert "keyframe_measurement" in out.err


def test_run_is_byte_identical(phantom_dir, tmp_path):
    outputs = []
    for k in range(2):
        rep, ovl = tmp_path / f"r{k}.json", tmp_path / f"o{k}.png"
        assert main(run_args(phantom_dir, "--report", str(rep), "--overlay", str(ovl))) == 0
        outputs.append((rep.read_bytes(), ovl.read_bytes()))
    assert outputs[0] == outputs[1]
    overlay = np.asarray(Image.open(tmp_path / "o0.png"))
    assert overlay.shape == (128, 128, 3)
    assert np.all(overlay == (0, 255, 0), axis=-1).any() and np.all(overlay == (0, 0, 255), axis=-1).any()


def test_console_script_matches_in_process(phantom_dir, tmp_path):
    rep = tmp_path / "sub.json"
    proc = subprocess.run(
        [sys.executable, "-m", "stenosis.cli", *run_args(phantom_dir, "--report", str(rep))],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "keyframe 100: PSA" in proc.stdout
    assert main(run_args(phantom_dir, "--report", str(tmp_path / "in.json"))) == 0
    assert rep.read_bytes() == (tmp_path / "in.json").read_bytes()


def test_manual_keyframe(phantom_dir, capsys):
    assert main(run_args(phantom_dir, "--manual-keyframe", "140")) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["keyframe_index"] == 140 and report["provenance"]["keyframe_source"] == "manual"
    assert main(run_args(phantom_dir, "--manual-keyframe", "200")) == 2


def test_ground_truth_depth_file(phantom_dir, capsys):
    depth = phantom_dir / "depth" / "frame_0100.depth"
    assert main(run_args(phantom_dir, "--manual-keyframe", "100", "--depth", f"file:{depth}")) == 0
    report = json.loads(capsys.readouterr().out)
    assert abs(report["psa"] - 75) <= 5 and abs(report["psd"] - 50) <= 5
    assert report["provenance"]["depth_provider"] == "file(frame_0100.depth)"


def test_flat_provider_is_available(phantom_dir, capsys):
    assert main(run_args(phantom_dir, "--manual-keyframe", "100", "--depth", "photometric-flat")) == 0
    assert json.loads(capsys.readouterr().out)["provenance"]["depth_provider"].startswith("photometric(")


def test_trace_outputs(phantom_dir, tmp_path, capsys):
    assert main(["trace", str(phantom_dir / "frames"), "--calib", str(phantom_dir / "calib.txt"), *SMALL[:2]]) == 0
    out = capsys.readouterr()
    lines = out.out.splitlines()
    assert lines[0] == "0 1.000000 0 Active"
    assert lines[-1].endswith(" 26 Lost") and "keyframe 100 (IoUBreak)" in out.err
    trace = tmp_path / "trace.txt"
    assert main(run_args(phantom_dir, "--trace", str(trace), "--obj", str(tmp_path / "m.obj"))) == 0
    text = trace.read_text().splitlines()
    assert text[0].startswith("#") and text[1:] == lines
    assert (tmp_path / "m.obj").read_text().count("\nl ") == 2


def test_eval_subcommand(phantom_dir, tmp_path, capsys):
    rep = tmp_path / "r.json"
    assert main(run_args(phantom_dir, "--report", str(rep))) == 0
    capsys.readouterr()
    manifest = tmp_path / "m.ini"
    manifest.write_text(f"[half]\nreport = r.json\ntruth = {phantom_dir / 'truth.json'}\n")
    assert main(["eval", str(manifest)]) == 0
    out = capsys.readouterr().out
    assert "correct keyframes (%) 100.00" in out and "half" in out


def test_render_from_spec(phantom_dir, tmp_path):
    spec = json.loads((phantom_dir / "phantom.json").read_text())
    spec["camera_z"] = spec["camera_z"][98:103]
    (tmp_path / "p.json").write_text(json.dumps(spec))
    assert main(["render", str(tmp_path / "out"), "--spec", str(tmp_path / "p.json"), "--width", "64", "--height", "64"]) == 0
    assert len(list((tmp_path / "out" / "frames").glob("*.png"))) == 5
    assert json.loads((tmp_path / "out" / "phantom.json").read_text()) == spec


def test_exit_codes(phantom_dir, tmp_path, capsys):
    calib = str(phantom_dir / "calib.txt")
    # ingest and usage problems
    assert main(["run", str(tmp_path / "nowhere"), "--calib", calib]) == 2
    (tmp_path / "bad.txt").write_text("fx = 1\n")
    assert main(["run", str(phantom_dir / "frames"), "--calib", str(tmp_path / "bad.txt")]) == 2
    assert main(run_args(phantom_dir, "--config", "speed=3")) == 2
    assert main(run_args(phantom_dir, "--depth", "lidar")) == 2
    # tracking never breaks before the cords
    early = tmp_path / "early"
    early.mkdir()
    for k in range(60):
        shutil.copy(phantom_dir / "frames" / f"frame_{k:04d}.png", early)
    assert main(["run", str(early), "--calib", calib, *SMALL]) == 3
    assert "NoKeyframe" in capsys.readouterr().err
    # the default 1% slab is too thin for a 128 px lip
    assert main(["run", str(phantom_dir / "frames"), "--calib", calib, "--config", "min_segment_pixels=4"]) == 4
    # unusable external depth
    save_depth(np.full((128, 128), np.nan), tmp_path / "nan.depth")
    assert main(run_args(phantom_dir, "--depth", f"file:{tmp_path / 'nan.depth'}")) == 5
    err = capsys.readouterr().err
    assert "[depth]" in err


def test_run_options_validation(phantom_dir):
    with pytest.raises(UsageError):
        RunOptions(phantom_dir, phantom_dir / "calib.txt", depth_provider="file:")
    with pytest.raises(UsageError):
        parse_overrides(["novalue"])
    assert parse_overrides(["a = 1", "b=x=y"]) == {"a": "1", "b": "x=y"}
    result = execute(
        RunOptions(phantom_dir / "frames", phantom_dir / "calib.txt", parse_overrides(SMALL[1::2]), manual_keyframe=150)
    )
    assert result.report.keyframe_index == 150 and result.trace == []
    assert result.stenosis.area < result.reference.area


@pytest.mark.xfail(
    strict=True,
    reason="healthy tube: far-field shading bias leaves PSA about +5.3 at every keyframe (ledgered)",
)
def test_healthy_phantom_example(tmp_path, capsys):
    assert main(["render", str(tmp_path), "--ratio", "1.0"]) == 0
    code = main(["run", str(tmp_path / "frames"), "--calib", str(tmp_path / "calib.txt"), "--manual-keyframe", "100"])
    if code == 3:
        return
    report = json.loads(capsys.readouterr().out)
    assert abs(report["psa"]) <= 5 and abs(report["psd"]) <= 5
