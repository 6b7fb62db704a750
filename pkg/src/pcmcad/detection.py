"""Candidate mass detections: a baseline blob detector over sift bands and an
importer for detections produced elsewhere (e.g. a Mask R-CNN export).

The blob detector is plain thresholding + connected components.  It exists so
the pipeline runs end to end and the evaluation harness has something to
score; it is not a substitute for a trained network.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .imgdata import BinaryMask, _read_label_png
from .sifting import SiftConfig, SiftOutput

Source = Union[int, str]


class DetectionSchemaError(ValueError):
    pass


def tight_bbox(bits: np.ndarray) -> Tuple[int, int, int, int]:
    """Inclusive ``(row0, col0, row1, col1)``."""
    rows = np.flatnonzero(bits.any(axis=1))
    cols = np.flatnonzero(bits.any(axis=0))
    if len(rows) == 0:
        raise ValueError("empty mask has no bounding box")
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


@dataclass(frozen=True, eq=False)
class Detection:
    mask: BinaryMask
    score: float
    source_band: Source = "external"

    def __post_init__(self):
        if self.mask.count == 0:
            raise ValueError("detection mask is empty")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @property
    def bbox(self) -> Tuple[int, int, int, int]:
        return tight_bbox(self.mask.bits)

    def sort_key(self):
        return (-self.score, self.bbox)

    def __eq__(self, other):
        if not isinstance(other, Detection):
            return NotImplemented
        return (self.score == other.score and self.source_band == other.source_band
                and self.mask == other.mask)


@dataclass(frozen=True)
class DetectorParams:
    quantile_q: float = 0.99
    min_area_px: float = 1.0
    max_area_px: float = float("inf")
    nms_iou: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.quantile_q < 1.0:
            raise ValueError(f"quantile_q must lie in (0, 1), got {self.quantile_q}")
        if not self.min_area_px < self.max_area_px:
            raise ValueError("min_area_px must be < max_area_px")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValueError(f"nms_iou must lie in (0, 1], got {self.nms_iou}")

    @classmethod
    def from_areas(cls, a_min_mm2: float, a_max_mm2: float, effective_pixel_size_mm: float,
                   quantile_q: float = 0.99, nms_iou: float = 0.5) -> "DetectorParams":
        px_area = effective_pixel_size_mm ** 2
        return cls(quantile_q, a_min_mm2 / px_area, a_max_mm2 / px_area, nms_iou)

    @classmethod
    def for_sift(cls, cfg: SiftConfig, quantile_q: float = 0.99, nms_iou: float = 0.5) -> "DetectorParams":
        return cls.from_areas(cfg.a_min_mm2, cfg.a_max_mm2, cfg.effective_pixel_size_mm, quantile_q, nms_iou)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    return inter / union if union else 0.0


def suppress(dets: Iterable[Detection], iou_threshold: float) -> List[Detection]:
    """Greedy IoU suppression; keeps the higher-scoring of any overlapping pair."""
    kept: List[Detection] = []
    for d in sorted(dets, key=Detection.sort_key):
        if all(iou(d.mask.bits, k.mask.bits) < iou_threshold for k in kept):
            kept.append(d)
    return kept


def blob_detect(bands: SiftOutput, breast_mask: Optional[BinaryMask], params: DetectorParams,
                effective_pixel_size_mm: Optional[float] = None) -> List[Detection]:
    """Quantile-threshold each band inside the breast, label 8-connected blobs,
    keep blobs inside the physical area range, merge across bands."""
    if not bands.bands:
        return []
    shape = bands.bands[0].pixels.shape
    region = np.ones(shape, dtype=bool) if breast_mask is None else breast_mask.bits
    if region.shape != shape:
        raise ValueError(f"breast mask shape {region.shape} != band shape {shape}")
    if not region.any():
        raise ValueError("breast mask is empty")
    if effective_pixel_size_mm is None:
        effective_pixel_size_mm = bands.config.effective_pixel_size_mm
    px_area = effective_pixel_size_mm ** 2
    a_min, a_max = params.min_area_px * px_area, params.max_area_px * px_area
    eight = np.ones((3, 3), dtype=bool)

    candidates = []
    for index, band in enumerate(bands.bands, start=1):
        values = band.pixels.astype(np.float64)
        inside = values[region]
        peak = inside.max()
        if peak <= 0:
            continue
        thr = np.quantile(inside, params.quantile_q)
        labels, n = ndimage.label((values > thr) & region, structure=eight)
        if n == 0:
            continue
        idx = np.arange(1, n + 1)
        counts = ndimage.sum_labels(np.ones(shape), labels, idx)
        means = ndimage.mean(values, labels, idx)
        for lab, count, mean in zip(idx, counts, means):
            area = count * px_area
            if not a_min <= area <= a_max:
                continue
            score = min(1.0, float(mean) / float(peak))
            candidates.append(Detection(BinaryMask(labels == lab), score, index))
    return suppress(candidates, params.nms_iou)


# ---------------------------------------------------------------------------
# Run-length encoding and detection JSON
# ---------------------------------------------------------------------------

def encode_rle(bits: np.ndarray) -> List[int]:
    """Row-major alternating run lengths, starting with a (possibly empty) zero run."""
    flat = np.asarray(bits, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def decode_rle(counts: Sequence[int], width: int, height: int) -> np.ndarray:
    total = width * height
    out = np.zeros(total, dtype=bool)
    pos = 0
    for i, run in enumerate(counts):
        if not isinstance(run, (int, np.integer)) or isinstance(run, bool) or run < 0 or run >= 2 ** 32:
            raise DetectionSchemaError(f"RLE count {run!r} is not a 32-bit unsigned integer")
        if pos + run > total:
            raise DetectionSchemaError(f"RLE overrun: runs exceed {width}x{height} = {total} pixels")
        if i % 2:
            out[pos:pos + run] = True
        pos += run
    return out.reshape(height, width)


def detections_to_json(dets: Sequence[Detection], image_stem: str) -> dict:
    return {
        "image": image_stem,
        "detections": [
            {"score": d.score, "bbox": list(d.bbox), "source_band": d.source_band,
             "mask_rle": encode_rle(d.mask.bits)}
            for d in dets
        ],
    }


def save_detections(dets: Sequence[Detection], path, image_stem: str) -> None:
    Path(path).write_text(json.dumps(detections_to_json(dets, image_stem), sort_keys=True) + "\n")


def import_detections(path, width: int, height: int) -> List[Detection]:
    """Parse a detection JSON file.  Boxes are recomputed and scores clamped."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such detection file")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DetectionSchemaError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("detections"), list):
        raise DetectionSchemaError(f'{path}: expected {{"image": ..., "detections": [...]}}')
    out = []
    for i, item in enumerate(doc["detections"]):
        where = f"{path}: detections[{i}]"
        if not isinstance(item, dict):
            raise DetectionSchemaError(f"{where}: must be an object")
        score = item.get("score")
        if not isinstance(score, (int, float)) or isinstance(score, bool) or score != score:
            raise DetectionSchemaError(f"{where}: score must be a number")
        if "mask_rle" in item:
            rle = item["mask_rle"]
            if not isinstance(rle, list):
                raise DetectionSchemaError(f"{where}: mask_rle must be a list of integers")
            try:
                bits = decode_rle(rle, width, height)
            except DetectionSchemaError as exc:
                raise DetectionSchemaError(f"{where}: {exc}") from None
        elif "mask_png" in item:
            png = path.parent / str(item["mask_png"])
            labels = _read_label_png(png)
            if labels.shape != (height, width):
                raise DetectionSchemaError(f"{where}: mask size {labels.shape[::-1]} != {(width, height)}")
            bits = labels > 0
        else:
            raise DetectionSchemaError(f"{where}: needs mask_rle or mask_png")
        if not bits.any():
            raise DetectionSchemaError(f"{where}: mask is empty")
        src = item.get("source_band", "external")
        out.append(Detection(BinaryMask(bits), float(min(1.0, max(0.0, score))),
                             src if isinstance(src, (int, str)) else "external"))
    return out
