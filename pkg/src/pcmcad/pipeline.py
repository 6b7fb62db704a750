"""File-level stages and the end-to-end driver behind the command line.

Each stage reads and writes plain files so it can be run on its own.  The
per-image prefix ``<dir>/<stem>`` ties the artefacts together::

    <stem>_pre.png  <stem>_mask.png  <stem>_pre.json     preprocess
    <stem>_band{i}.png  <stem>_band{i}.raw  <stem>_pcm.png  <stem>_sift.json
    <stem>.json (under detections/)                       detect
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .detection import DetectorParams, blob_detect, save_detections
from .evaluation import EvalConfig, EvalReport, aggregate, emit_report, evaluate_split
from .imgdata import (BinaryMask, DatasetManifest, GrayImage16, ManifestError, load_gray16,
                      load_manifest, load_mask, save_gray16, save_mask, save_rgb8)
from .preprocess import preprocess
from .sifting import (SiftConfig, SiftOutput, band_to_display16, compose_pcm, read_band_raw,
                      sift, write_band_raw)

logger = logging.getLogger(__name__)

BASELINE_NOTE = "baseline quantile blob detector; not a trained detection network"


class StageError(Exception):
    """Wraps the exception raised inside a named pipeline stage."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.cause = exc


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectorSettings:
    quantile_q: float = 0.99
    nms_iou: float = 0.5

    def resolve(self, sift_cfg: SiftConfig) -> DetectorParams:
        return DetectorParams.for_sift(sift_cfg, self.quantile_q, self.nms_iou)


@dataclass(frozen=True)
class PipelineConfig:
    sift: SiftConfig = field(default_factory=SiftConfig)
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    eval: EvalConfig = field(default_factory=EvalConfig)
    role: str = "test"
    figures: bool = True

    def to_dict(self) -> dict:
        params = self.detector.resolve(self.sift)
        return {
            "sift": self.sift.to_dict(),
            "detector": {"quantile_q": self.detector.quantile_q, "nms_iou": self.detector.nms_iou,
                         "min_area_px": params.min_area_px, "max_area_px": params.max_area_px},
            "eval": self.eval.to_dict(),
            "role": self.role,
            "figures": self.figures,
        }

    @classmethod
    def from_dict(cls, doc) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ValueError("pipeline config must be a JSON object")
        unknown = set(doc) - {"sift", "detector", "eval", "role", "figures"}
        if unknown:
            raise ValueError(f"unknown pipeline config keys {sorted(unknown)}")
        det = dict(doc.get("detector", {}))
        # derived values may be echoed back from a run.json; they must agree
        derived = {k: det.pop(k) for k in ("min_area_px", "max_area_px") if k in det}
        unknown = set(det) - {"quantile_q", "nms_iou"}
        if unknown:
            raise ValueError(f"unknown detector config keys {sorted(unknown)}")
        cfg = cls(
            sift=SiftConfig.from_dict(doc.get("sift", {})),
            detector=DetectorSettings(**det),
            eval=EvalConfig.from_dict(doc.get("eval", {})),
            role=doc.get("role", "test"),
            figures=bool(doc.get("figures", True)),
        )
        params = cfg.detector.resolve(cfg.sift)  # validates ranges
        for k, v in derived.items():
            if not np.isclose(v, getattr(params, k)):
                raise ValueError(f"detector.{k}={v} disagrees with the sift area range")
        return cfg


def load_json_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such config file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None


# ---------------------------------------------------------------------------
# Run record
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunRecord:
    """Collects what a command resolved and read; written as ``run.json``."""

    def __init__(self, command: str, argv: Sequence[str]):
        self.doc = {"command": command, "argv": list(argv), "config": {}, "inputs": {},
                    "status": "running", "failed_stage": None, "error": None}

    def config(self, **items) -> None:
        self.doc["config"].update(items)

    def input(self, path) -> None:
        path = Path(path)
        if path.is_file():
            self.doc["inputs"][str(path)] = sha256_file(path)

    def finish(self, exit_code: int, stage: Optional[str] = None, error: Optional[str] = None) -> None:
        self.doc.update(status="ok" if exit_code == 0 else "failed", exit_code=exit_code,
                        failed_stage=stage, error=error)

    def write(self, out_dir) -> Optional[Path]:
        try:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            p = out_dir / "run.json"
            p.write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n")
            return p
        except OSError as exc:
            logger.error("could not write run.json: %s", exc)
            return None


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def preprocess_file(image_path, out_dir, pixel_size_mm: float, stem: Optional[str] = None) -> Path:
    """Write ``<stem>_pre.png``, ``<stem>_mask.png`` and ``<stem>_pre.json``; return the prefix."""
    image_path, out_dir = Path(image_path), Path(out_dir)
    stem = stem or image_path.stem
    out_dir.mkdir(parents=True, exist_ok=True)
    result = preprocess(load_gray16(image_path, pixel_size_mm))
    prefix = out_dir / stem
    save_gray16(result.image, f"{prefix}_pre.png")
    save_mask(result.breast_mask, f"{prefix}_mask.png")
    side = dict(result.sidecar(), source=image_path.name, source_pixel_size_mm=pixel_size_mm)
    Path(f"{prefix}_pre.json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return prefix


def sift_file(pre_path, mask_path: Optional[Path], cfg: SiftConfig, out_prefix) -> SiftOutput:
    """Write per-band PNG and raw sidecars, the pseudo-color PNG and ``_sift.json``."""
    out_prefix = str(out_prefix)
    Path(out_prefix).parent.mkdir(parents=True, exist_ok=True)
    img = load_gray16(pre_path, cfg.effective_pixel_size_mm)
    mask = load_mask(mask_path) if mask_path is not None else None
    if mask is not None and mask.bits.shape != img.pixels.shape:
        raise ValueError(f"mask {mask.bits.shape} and image {img.pixels.shape} differ in size")
    out = sift(img, cfg)
    for i, band in enumerate(out.bands, start=1):
        save_gray16(band_to_display16(band, cfg.num_orientations), f"{out_prefix}_band{i}.png")
        write_band_raw(band, f"{out_prefix}_band{i}.raw")
    if cfg.num_scales == 2:
        save_rgb8(compose_pcm(img, out, mask), f"{out_prefix}_pcm.png")
    Path(f"{out_prefix}_sift.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def read_bands(prefix) -> Tuple[SiftOutput, Optional[BinaryMask]]:
    """Load ``<prefix>_band{i}.raw`` and, when present, the sift config and breast mask."""
    prefix = str(prefix)
    cfg_path = Path(f"{prefix}_sift.json")
    cfg = SiftConfig.from_dict(json.loads(cfg_path.read_text())) if cfg_path.is_file() else SiftConfig()
    bands = []
    i = 1
    while Path(f"{prefix}_band{i}.raw").is_file():
        bands.append(read_band_raw(f"{prefix}_band{i}.raw"))
        i += 1
    if not bands:
        raise FileNotFoundError(f"{prefix}_band1.raw: no such band file")
    if len(bands) != cfg.num_scales:
        raise ValueError(f"{prefix}: found {len(bands)} bands but config declares {cfg.num_scales}")
    mask_path = Path(f"{prefix}_mask.png")
    mask = load_mask(mask_path) if mask_path.is_file() else None
    return SiftOutput(bands, cfg), mask


def detect_file(prefix, out_path, settings: DetectorSettings, mask_path=None) -> int:
    bands, mask = read_bands(prefix)
    if mask_path is not None:
        mask = load_mask(mask_path)
    params = settings.resolve(bands.config)
    dets = blob_detect(bands, mask, params, bands.config.effective_pixel_size_mm)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    save_detections(dets, out_path, Path(str(prefix)).name)
    return len(dets)


def evaluate_manifest(manifest: DatasetManifest, detections_dir, out_dir, config: EvalConfig,
                      role: str = "test", figures: bool = True,
                      detector_note: str = "external") -> EvalReport:
    cache: dict = {}
    entries, curves = [], {}
    for sid in manifest.split_ids:
        if not manifest.select(sid, role):
            continue
        metrics, curve = evaluate_split(manifest, sid, detections_dir, role, config, cache)
        entries.append(metrics)
        curves[sid] = curve
    if not entries:
        raise ValueError(f"no split has images with role {role!r}")
    protocol = dict(config.to_dict(), role=role, detector=detector_note,
                    matching="greedy by descending score, one mass per detection")
    report = aggregate(entries, protocol)
    emit_report(report, curves, out_dir, figures=figures)
    return report


# ---------------------------------------------------------------------------
# End-to-end driver
# ---------------------------------------------------------------------------

def unique_images(manifest: DatasetManifest, role: str) -> List[Tuple[str, Path]]:
    """``(stem, image_path)`` for every image used under ``role``; stems must be unique."""
    seen: Dict[str, Path] = {}
    for e in manifest.entries:
        if e.fold_role != role:
            continue
        prev = seen.setdefault(e.stem, e.image_path)
        if prev != e.image_path:
            raise ManifestError("entries", f"stem {e.stem!r} names two images: {prev} and {e.image_path}")
    return sorted(seen.items())


def _image_job(args) -> Tuple[str, int]:
    stem, image_path, work_dir, det_dir, pixel_size_mm, cfg_doc, figures, run_detect = args
    cfg = PipelineConfig.from_dict(cfg_doc)
    stage = "preprocess"
    try:
        prefix = preprocess_file(image_path, work_dir, pixel_size_mm, stem)
        stage = "sift"
        out = sift_file(f"{prefix}_pre.png", f"{prefix}_mask.png", cfg.sift, prefix)
        if figures and cfg.sift.num_scales == 2:
            _pcm_figure(prefix, out, stem)
        n = -1
        if run_detect:
            stage = "detect"
            n = detect_file(prefix, Path(det_dir) / f"{stem}.json", cfg.detector)
        return stem, n
    except Exception as exc:
        raise StageError(stage, exc) from exc


def _pcm_figure(prefix, out: SiftOutput, stem: str) -> None:
    from .plotting import plot_pcm_panel
    img = load_gray16(f"{prefix}_pre.png")
    mask = load_mask(f"{prefix}_mask.png")
    plot_pcm_panel(img.pixels, compose_pcm(img, out, mask), f"{prefix}_panel.png", title=stem)


def run_pipeline(manifest_path, out_dir, cfg: PipelineConfig, jobs: int = 1,
                 detections_dir=None, record: Optional[RunRecord] = None) -> EvalReport:
    """preprocess -> sift/PCM -> detect (unless ``detections_dir``) -> evaluate."""
    out_dir = Path(out_dir)
    try:
        manifest = load_manifest(manifest_path)
    except Exception as exc:
        raise StageError("manifest", exc) from exc
    if record is not None:
        record.input(manifest_path)
        for e in manifest.entries:
            record.input(e.image_path)
            if e.annotation_path is not None:
                record.input(e.annotation_path)
    work_dir = out_dir / "images"
    det_dir = Path(detections_dir) if detections_dir is not None else out_dir / "detections"
    try:
        images = unique_images(manifest, cfg.role)
    except Exception as exc:
        raise StageError("manifest", exc) from exc
    cfg_doc = cfg.to_dict()
    jobs_args = [(stem, path, work_dir, det_dir, manifest.pixel_size_mm, cfg_doc, cfg.figures,
                  detections_dir is None) for stem, path in images]
    results = map_jobs(_image_job, jobs_args, jobs)
    for stem, n in results:
        if n >= 0:
            logger.info("%s: %d detections", stem, n)
    try:
        return evaluate_manifest(manifest, det_dir, out_dir, cfg.eval, cfg.role, cfg.figures,
                                 BASELINE_NOTE if detections_dir is None else "external")
    except Exception as exc:
        raise StageError("evaluate", exc) from exc


def map_jobs(fn, items: Sequence, jobs: int) -> list:
    """``[fn(x) for x in items]``, on a process pool when ``jobs > 1``.  Order is kept."""
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
