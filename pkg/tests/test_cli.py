import json
import subprocess
import sys

import numpy as np
import pytest

from pcmcad.cli import main
from pcmcad.detection import Detection, save_detections
from pcmcad.evaluation import load_working_truth
from pcmcad.imgdata import BinaryMask, load_manifest
from pcmcad.sifting import read_band_raw


def run_json(d):
    return json.loads((d / "run.json").read_text())


def write_perfect_detections(manifest_path, out_dir):
    manifest = load_manifest(manifest_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    for e in manifest.select(role="test"):
        _, gts = load_working_truth(e, manifest.pixel_size_mm)
        dets = [Detection(BinaryMask(g), 1.0 - 0.1 * i) for i, g in enumerate(gts)]
        save_detections(dets, out_dir / f"{e.stem}.json", e.stem)


# --- exit codes and run records ----------------------------------------------------------

def test_unknown_flag_exits_1_with_usage(capsys):
    assert main(["pipeline", "--bogus"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_command_exits_1(capsys):
    assert main([]) == 1


def test_missing_manifest_exits_2_and_records_stage(tmp_path):
    out = tmp_path / "r"
    assert main(["pipeline", "--manifest", str(tmp_path / "none.json"), "--out-dir", str(out)]) == 2
    rec = run_json(out)
    assert rec["exit_code"] == 2 and rec["failed_stage"] == "manifest" and rec["error"]


def test_invalid_manifest_exits_1(tmp_path):
    (tmp_path / "m.json").write_text('{"splits": 3}')
    out = tmp_path / "r"
    assert main(["evaluate", "--manifest", str(tmp_path / "m.json"), "--detections-dir", str(tmp_path),
                 "--out-dir", str(out)]) == 1
    assert run_json(out)["failed_stage"] == "manifest"


def test_bad_config_exits_1(tmp_path, phantom_manifest):
    (tmp_path / "c.json").write_text('{"sift": {"num_orientations": 0}}')
    out = tmp_path / "r"
    assert main(["pipeline", "--manifest", str(phantom_manifest), "--out-dir", str(out),
                 "--config", str(tmp_path / "c.json")]) == 1
    assert run_json(out)["failed_stage"] == "config"
    (tmp_path / "c.json").write_text('{"sift": {"pixel_size_mm": 0.1}}')
    assert main(["pipeline", "--manifest", str(phantom_manifest), "--out-dir", str(out),
                 "--config", str(tmp_path / "c.json")]) == 1
    (tmp_path / "c.json").write_text('{"detectr": {}}')
    assert main(["pipeline", "--manifest", str(phantom_manifest), "--out-dir", str(out),
                 "--config", str(tmp_path / "c.json")]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "pcmcad", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("pcmcad ")


def test_morph_selftest_command(capsys):
    assert main(["morph-selftest", "--images", "2"]) == 0
    assert "0 failed" in capsys.readouterr().out


# --- full pipeline -------------------------------------------------------------------------

def test_pipeline_outputs(pipeline_run, phantom_manifest):
    manifest = load_manifest(phantom_manifest)
    stems = sorted({e.stem for e in manifest.select(role="test")})
    for s in stems:
        for suffix in ("_pcm.png", "_band1.png", "_band2.raw", "_panel.png", "_pre.png", "_mask.png"):
            assert (pipeline_run / "images" / f"{s}{suffix}").is_file()
        assert (pipeline_run / "detections" / f"{s}.json").is_file()
    report = json.loads((pipeline_run / "report.json").read_text())
    assert len(report["splits"]) == 2
    for split in report["splits"]:
        for key in ("tpr_at_ref_fpi", "aufc", "mean_dsi", "n_images", "n_masses"):
            assert split[key] is not None
    assert "not a trained" in report["protocol"]["detector"]
    for name in ("froc.svg", "froc.png", "froc_split0.csv", "froc_split1.csv"):
        assert (pipeline_run / name).is_file()
    rec = run_json(pipeline_run)
    assert rec["exit_code"] == 0 and rec["failed_stage"] is None
    assert rec["config"]["sift"]["num_orientations"] == 18
    assert str(phantom_manifest) in rec["inputs"]
    assert all(len(h) == 64 for h in rec["inputs"].values())


def test_config_override_changes_bands(tmp_path, phantom_manifest, pipeline_run):
    (tmp_path / "c.json").write_text('{"sift": {"num_orientations": 6}}')
    out = tmp_path / "r"
    assert main(["pipeline", "--manifest", str(phantom_manifest), "--out-dir", str(out),
                 "--config", str(tmp_path / "c.json"), "--no-figures"]) == 0
    assert run_json(out)["config"]["sift"]["num_orientations"] == 6
    a = read_band_raw(out / "images" / "case00_band1.raw").pixels
    b = read_band_raw(pipeline_run / "images" / "case00_band1.raw").pixels
    assert a.shape == b.shape and not np.array_equal(a, b)
    assert not (out / "images" / "case00_panel.png").exists()


def test_imported_perfect_detections(tmp_path, phantom_manifest):
    dets = tmp_path / "dets"
    write_perfect_detections(phantom_manifest, dets)
    out = tmp_path / "r"
    assert main(["pipeline", "--manifest", str(phantom_manifest), "--out-dir", str(out),
                 "--detections-dir", str(dets), "--no-figures"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["protocol"]["detector"] == "external"
    for split in report["splits"]:
        assert split["tpr_at_ref_fpi"] == 1.0 and split["operating_fpi"] == 0.0
        assert split["mean_dsi"] == 1.0
    assert (out / "froc_split0.csv").read_text().splitlines()[1:] == ["0.0,1.0"]
    assert not (out / "detections").exists()


# --- stage-by-stage commands ----------------------------------------------------------------

def test_stage_commands(tmp_path, phantom_manifest):
    pre = tmp_path / "pre"
    assert main(["preprocess", "--manifest", str(phantom_manifest), "--out-dir", str(pre)]) == 0
    assert (pre / "case00_pre.png").is_file() and (pre / "normal1_mask.png").is_file()
    side = json.loads((pre / "case00_pre.json").read_text())
    assert side["effective_pixel_size_mm"] == pytest.approx(0.28)

    x = tmp_path / "sift" / "case00"
    assert main(["sift", "--in", str(pre / "case00_pre.png"), "--mask", str(pre / "case00_mask.png"),
                 "--out-prefix", str(x)]) == 0
    for suffix in ("_band1.png", "_band2.png", "_band1.raw", "_band2.raw", "_pcm.png", "_sift.json"):
        assert (tmp_path / "sift" / f"case00{suffix}").is_file()
    assert run_json(tmp_path / "sift")["command"] == "sift"

    det = tmp_path / "det" / "case00.json"
    assert main(["detect", "--bands", str(x), "--out", str(det), "--mask", str(pre / "case00_mask.png")]) == 0
    doc = json.loads(det.read_text())
    assert doc["image"] == "case00" and doc["detections"]

    # evaluate needs detections for every test image; reuse perfect ones for the others
    write_perfect_detections(phantom_manifest, tmp_path / "det2")
    (tmp_path / "det2" / "case00.json").write_text(det.read_text())
    out = tmp_path / "eval"
    assert main(["evaluate", "--manifest", str(phantom_manifest), "--detections-dir",
                 str(tmp_path / "det2"), "--out-dir", str(out), "--no-figures"]) == 0
    assert (out / "report.json").is_file() and not (out / "froc.png").exists()


def test_evaluate_lists_missing_detections(tmp_path, phantom_manifest, capsys):
    out = tmp_path / "eval"
    assert main(["evaluate", "--manifest", str(phantom_manifest), "--detections-dir",
                 str(tmp_path / "empty"), "--out-dir", str(out)]) == 2
    err = capsys.readouterr().err
    assert "case00.json" in err and "case02.json" in err
    assert run_json(out)["failed_stage"] == "evaluate"


def test_sift_with_three_scales_skips_color(tmp_path, phantom_manifest):
    pre = tmp_path / "pre"
    assert main(["preprocess", "--manifest", str(phantom_manifest), "--out-dir", str(pre), "--jobs", "1"]) == 0
    (tmp_path / "c.json").write_text('{"num_scales": 3, "num_orientations": 2}')
    x = tmp_path / "s" / "case01"
    assert main(["sift", "--in", str(pre / "case01_pre.png"), "--config", str(tmp_path / "c.json"),
                 "--out-prefix", str(x)]) == 0
    assert (tmp_path / "s" / "case01_band3.raw").is_file()
    assert not (tmp_path / "s" / "case01_pcm.png").exists()
