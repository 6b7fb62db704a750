"""Detection/segmentation scoring: Dice, TP matching, FROC and its summaries."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
from xml.sax.saxutils import escape

import numpy as np

from .detection import Detection, import_detections
from .imgdata import BinaryMask, DatasetManifest, GroundTruthMass, load_annotation, load_gray16
from .preprocess import PreprocessResult, preprocess

MaskLike = Union[BinaryMask, GroundTruthMass, np.ndarray]
ImageCase = Tuple[Sequence[Detection], Sequence[MaskLike]]


class EvaluationError(ValueError):
    pass


def _bits(m: MaskLike) -> np.ndarray:
    if isinstance(m, (GroundTruthMass, Detection)):
        return m.mask.bits
    if isinstance(m, BinaryMask):
        return m.bits
    return np.asarray(m, dtype=bool)


def dice(a: MaskLike, b: MaskLike) -> float:
    a, b = _bits(a), _bits(b)
    if a.shape != b.shape:
        raise ValueError(f"mask dimensions differ: {a.shape} vs {b.shape}")
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        raise ValueError("dice is undefined for two empty masks")
    return 2.0 * np.count_nonzero(a & b) / total


@dataclass(frozen=True)
class MatchResult:
    tp_pairs: List[Tuple[int, int, float]]
    fp_indices: List[int]
    fn_gt_indices: List[int]


def score_order(dets: Sequence[Detection]) -> List[int]:
    """Indices by descending score, ties broken by bounding box then input order."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].bbox, i))


def match_detections(dets: Sequence[Detection], gts: Sequence[MaskLike],
                     dsi_threshold: float = 0.2) -> MatchResult:
    """Greedy matching: each detection, best score first, claims the still
    unmatched ground truth with the highest DSI >= threshold."""
    gt_bits = [_bits(g) for g in gts]
    claimed = [False] * len(gt_bits)
    tps, fps = [], []
    for di in score_order(dets):
        best, best_dsi = -1, -1.0
        for gi, g in enumerate(gt_bits):
            if claimed[gi]:
                continue
            d = dice(dets[di].mask, g)
            if d >= dsi_threshold and d > best_dsi:
                best, best_dsi = gi, d
        if best < 0:
            fps.append(di)
        else:
            claimed[best] = True
            tps.append((di, best, best_dsi))
    return MatchResult(tps, fps, [gi for gi, c in enumerate(claimed) if not c])


@dataclass(frozen=True)
class FrocCurve:
    points: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(f), float(t)) for f, t in self.points)
        if not pts:
            raise ValueError("FROC curve needs at least one point")
        for (f0, t0), (f1, t1) in zip(pts, pts[1:]):
            if not f1 > f0:
                raise ValueError("FROC fpi values must be strictly increasing")
            if t1 < t0:
                raise ValueError("FROC tpr must be non-decreasing")
        if any(f < 0 or not 0 <= t <= 1 for f, t in pts):
            raise ValueError("FROC points need fpi >= 0 and tpr in [0, 1]")
        object.__setattr__(self, "points", pts)

    @property
    def fpi(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def tpr(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


@dataclass(frozen=True)
class _Sweep:
    # one row per threshold, descending; thresholds[0] is +inf
    thresholds: List[float]
    fpi: List[float]
    tpr: List[float]
    scored: List[Tuple[float, bool, float]]  # (score, is_tp, dsi) per detection


def _sweep(cases: Sequence[ImageCase], dsi_threshold: float) -> _Sweep:
    n_images = len(cases)
    n_gt = sum(len(g) for _, g in cases)
    if n_gt == 0:
        raise EvaluationError("split contains no ground-truth masses")
    scored = []
    for dets, gts in cases:
        # outcomes of the greedy matcher never depend on lower-scored detections,
        # so one full matching per image serves every threshold
        res = match_detections(dets, gts, dsi_threshold)
        for di, _, d in res.tp_pairs:
            scored.append((dets[di].score, True, d))
        for di in res.fp_indices:
            scored.append((dets[di].score, False, 0.0))
    thresholds = [math.inf] + sorted({s for s, _, _ in scored}, reverse=True)
    scores = np.array([s for s, _, _ in scored])
    is_tp = np.array([t for _, t, _ in scored], dtype=bool)
    fpi, tpr = [], []
    for t in thresholds:
        keep = scores >= t
        fpi.append(int(np.count_nonzero(keep & ~is_tp)) / n_images)
        tpr.append(int(np.count_nonzero(keep & is_tp)) / n_gt)
    return _Sweep(thresholds, fpi, tpr, scored)


def _collapse(fpi: Sequence[float], tpr: Sequence[float]) -> FrocCurve:
    best: Dict[float, float] = {}
    for f, t in zip(fpi, tpr):
        best[f] = max(t, best.get(f, 0.0))
    return FrocCurve(tuple(sorted(best.items())))


def froc(cases: Sequence[ImageCase], dsi_threshold: float = 0.2) -> FrocCurve:
    """FROC over every distinct detection score (plus +inf).

    FPI counts every image, including images without masses.
    """
    sw = _sweep(cases, dsi_threshold)
    return _collapse(sw.fpi, sw.tpr)


def _extended(curve: FrocCurve) -> Tuple[np.ndarray, np.ndarray]:
    f, t = curve.fpi, curve.tpr
    if f[0] > 0:
        f = np.concatenate(([0.0], f))
        t = np.concatenate(([0.0], t))
    return f, t


def tpr_at_fpi(curve: FrocCurve, fpi_ref: float) -> float:
    """Linear interpolation; left-extended with (0, 0) when no zero-FP point
    exists, flat to the right of the last point."""
    f, t = _extended(curve)
    return float(np.interp(fpi_ref, f, t))


def partial_aufc(curve: FrocCurve, fpi_lo: float = 0.0, fpi_hi: float = 5.0) -> float:
    """Normalised trapezoidal area under the interpolated curve on [lo, hi]."""
    if not fpi_hi > fpi_lo:
        raise ValueError(f"need fpi_hi > fpi_lo, got [{fpi_lo}, {fpi_hi}]")
    f, _ = _extended(curve)
    xs = np.unique(np.concatenate(([fpi_lo, fpi_hi], f[(f > fpi_lo) & (f < fpi_hi)])))
    ys = np.array([tpr_at_fpi(curve, x) for x in xs])
    area = float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))
    return area / (fpi_hi - fpi_lo)


# ---------------------------------------------------------------------------
# Split evaluation and aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    dsi_threshold: float = 0.2
    fpi_ref: float = 0.9
    aufc_range: Tuple[float, float] = (0.0, 5.0)

    def __post_init__(self):
        if not 0 < self.dsi_threshold <= 1:
            raise ValueError("dsi_threshold must lie in (0, 1]")
        if self.fpi_ref < 0:
            raise ValueError("fpi_ref must be >= 0")
        lo, hi = self.aufc_range
        if not hi > lo >= 0:
            raise ValueError("aufc_range must satisfy 0 <= lo < hi")
        object.__setattr__(self, "aufc_range", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        return {"dsi_threshold": self.dsi_threshold, "fpi_ref": self.fpi_ref,
                "aufc_range": list(self.aufc_range)}

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalConfig":
        unknown = set(doc) - {"dsi_threshold", "fpi_ref", "aufc_range"}
        if unknown:
            raise ValueError(f"unknown eval config keys {sorted(unknown)}")
        d = dict(doc)
        if "aufc_range" in d:
            d["aufc_range"] = tuple(d["aufc_range"])
        return cls(**d)


@dataclass(frozen=True)
class SplitMetrics:
    split_id: int
    tpr_at_ref_fpi: float
    aufc: float
    mean_dsi: Optional[float]
    n_images: int
    n_masses: int
    operating_threshold: Optional[float] = None
    operating_fpi: Optional[float] = None


METRICS = ("tpr_at_ref_fpi", "aufc", "mean_dsi")


@dataclass(frozen=True)
class EvalReport:
    splits: List[SplitMetrics]
    aggregate: Dict[str, Dict[str, Optional[float]]]
    protocol: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"splits": [asdict(s) for s in self.splits], "aggregate": self.aggregate,
                "protocol": self.protocol}

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls([SplitMetrics(**s) for s in doc["splits"]], doc["aggregate"], doc.get("protocol", {}))


def evaluate_cases(split_id: int, cases: Sequence[ImageCase],
                   config: EvalConfig = EvalConfig()) -> Tuple[SplitMetrics, FrocCurve]:
    sw = _sweep(cases, config.dsi_threshold)
    curve = _collapse(sw.fpi, sw.tpr)
    # operating threshold: largest FPI not above the reference; lowest threshold among ties
    k = max(i for i, f in enumerate(sw.fpi) if f <= config.fpi_ref)
    thr = sw.thresholds[k]
    dsis = [d for s, tp, d in sw.scored if tp and s >= thr]
    metrics = SplitMetrics(
        split_id=split_id,
        tpr_at_ref_fpi=tpr_at_fpi(curve, config.fpi_ref),
        aufc=partial_aufc(curve, *config.aufc_range),
        mean_dsi=float(np.mean(dsis)) if dsis else None,
        n_images=len(cases),
        n_masses=sum(len(g) for _, g in cases),
        operating_threshold=None if math.isinf(thr) else thr,
        operating_fpi=sw.fpi[k],
    )
    return metrics, curve


def aggregate(entries: Sequence[SplitMetrics], protocol: Optional[dict] = None) -> EvalReport:
    """Mean and population standard deviation of each metric across splits."""
    agg: Dict[str, Dict[str, Optional[float]]] = {}
    for name in METRICS:
        vals = [getattr(e, name) for e in entries if getattr(e, name) is not None]
        if vals:
            agg[name] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
        else:
            agg[name] = {"mean": None, "std": None, "n": 0}
    return EvalReport(list(entries), agg, dict(protocol or {}))


def load_working_truth(entry, pixel_size_mm: float,
                       cache: Optional[dict] = None) -> Tuple[PreprocessResult, List[np.ndarray]]:
    """Preprocess geometry and ground-truth masks mapped to the working frame."""
    key = (str(entry.image_path), str(entry.annotation_path))
    if cache is not None and key in cache:
        return cache[key]
    img = load_gray16(entry.image_path, pixel_size_mm)
    pre = preprocess(img)
    gts = []
    if entry.annotation_path is not None:
        for m in load_annotation(entry.annotation_path, img.width, img.height, pixel_size_mm):
            gts.append(pre.to_working(m.mask.bits))
    out = (pre, gts)
    if cache is not None:
        cache[key] = out
    return out


def evaluate_split(manifest: DatasetManifest, split_id: int, detections_dir, role: str = "test",
                   config: EvalConfig = EvalConfig(),
                   cache: Optional[dict] = None) -> Tuple[SplitMetrics, FrocCurve]:
    """Score ``<detections_dir>/<stem>.json`` for every ``role`` image of a split.

    Ground truth is compared at the working (subsampled) resolution.
    """
    detections_dir = Path(detections_dir)
    entries = manifest.select(split_id, role)
    missing = [str(detections_dir / f"{e.stem}.json") for e in entries
               if not (detections_dir / f"{e.stem}.json").is_file()]
    if missing:
        raise FileNotFoundError("missing detection files:\n  " + "\n  ".join(missing))
    cases = []
    for e in entries:
        pre, gts = load_working_truth(e, manifest.pixel_size_mm, cache)
        side = pre.image.width
        cases.append((import_detections(detections_dir / f"{e.stem}.json", side, side), gts))
    return evaluate_cases(split_id, cases, config)


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

_PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def froc_svg(curves: Dict[int, FrocCurve], fpi_ref: float, fpi_max: float = 5.0) -> str:
    """Deterministic SVG: one polyline per split, operating points marked."""
    W, H, m = 480, 360, 48
    sx = (W - 2 * m) / fpi_max
    sy = (H - 2 * m)

    def xy(f, t):
        return f"{m + min(f, fpi_max) * sx:.3f},{H - m - t * sy:.3f}"

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="{m}" y="{m}" width="{W - 2 * m}" height="{H - 2 * m}" fill="none" stroke="#000"/>',
        f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="12">false positives per image</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {H / 2})">true positive rate</text>',
    ]
    for i, (sid, curve) in enumerate(sorted(curves.items())):
        f, t = _extended(curve)
        f = np.append(f, fpi_max)
        t = np.append(t, t[-1])
        keep = f <= fpi_max
        pts = " ".join(xy(a, b) for a, b in zip(f[keep], t[keep]))
        colour = _PALETTE[i % len(_PALETTE)]
        parts.append(f'<polyline data-split="{sid}" fill="none" stroke="{colour}" points="{pts}"/>')
        cx, cy = xy(fpi_ref, tpr_at_fpi(curve, fpi_ref)).split(",")
        parts.append(f'<circle cx="{cx}" cy="{cy}" r="3" fill="{colour}">'
                     f'<title>{escape(f"split {sid}")}</title></circle>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(report: EvalReport, curves: Dict[int, FrocCurve], out_dir,
                figures: bool = True) -> List[Path]:
    """Write ``froc_split{k}.csv``, ``report.json``, ``froc.svg`` (and ``froc.png``)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for sid, curve in sorted(curves.items()):
        p = out_dir / f"froc_split{sid}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpi", "tpr"])
            for f, t in curve.points:
                w.writerow([repr(f), repr(t)])
        written.append(p)
    p = out_dir / "report.json"
    p.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    written.append(p)
    fpi_ref = float(report.protocol.get("fpi_ref", 0.9))
    fpi_max = float(report.protocol.get("aufc_range", (0.0, 5.0))[1])
    p = out_dir / "froc.svg"
    p.write_text(froc_svg(curves, fpi_ref, fpi_max))
    written.append(p)
    if figures:
        from .plotting import plot_froc
        written.append(plot_froc(curves, report, out_dir / "froc.png"))
    return written


def read_curve_csv(path) -> FrocCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return FrocCurve(tuple((float(a), float(b)) for a, b in rows))
