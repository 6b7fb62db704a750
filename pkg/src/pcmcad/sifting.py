"""Multi-scale morphological sifting and pseudo-color composition.

For scale ``i`` the sifter keeps structures whose diameter lies between two
line lengths ``m1(i) < m2(i)``::

    band_i = sum_n open(F - open(F, L(m2, t_n)), L(m1, t_n)),  t_n = n * 180 / N

The white top-hat with the long line removes everything wider than ``m2``;
re-opening the residue with the short line removes everything narrower
than ``m1``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import List, Optional, Union

import numpy as np

from .imgdata import BinaryMask, GrayImage16, GrayImage32, PseudoColorImage
from .morphology import make_line_se, open_array, orientation_angles


class UnsupportedConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SiftConfig:
    a_min_mm2: float = 15.0
    a_max_mm2: float = 3689.0
    num_scales: int = 2
    num_orientations: int = 18
    pixel_size_mm: float = 0.07
    resize_factor: int = 4

    def __post_init__(self):
        if not 0 < self.a_min_mm2 < self.a_max_mm2:
            raise ValueError(f"need 0 < a_min_mm2 < a_max_mm2, got {self.a_min_mm2}, {self.a_max_mm2}")
        if self.num_scales < 1 or self.num_orientations < 1:
            raise ValueError("num_scales and num_orientations must be >= 1")
        if not self.pixel_size_mm > 0 or self.resize_factor < 1:
            raise ValueError("pixel_size_mm must be > 0 and resize_factor >= 1")

    @property
    def effective_pixel_size_mm(self) -> float:
        return self.pixel_size_mm * self.resize_factor

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SiftConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown sift config keys {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class ScaleBand:
    index: int
    m1_px: float
    m2_px: float

    @property
    def m1_rounded(self) -> int:
        return nearest_odd(self.m1_px)

    @property
    def m2_rounded(self) -> int:
        return nearest_odd(self.m2_px)


@dataclass(frozen=True)
class SiftOutput:
    bands: List[GrayImage32]
    config: SiftConfig


def nearest_odd(x: float) -> int:
    """Nearest odd integer, ties (even integers) rounding up; never below 1."""
    return max(1, 2 * math.floor((x - 1) / 2 + 0.5) + 1)


def compute_scale_bands(cfg: SiftConfig) -> List[ScaleBand]:
    base = 2.0 / (cfg.pixel_size_mm * cfg.resize_factor) * math.sqrt(cfg.a_min_mm2 / math.pi)
    ratio = cfg.a_max_mm2 / cfg.a_min_mm2
    I = cfg.num_scales
    # m1 of scale i+1 and m2 of scale i share the exponent, hence the same float
    edges = [base * ratio ** (0.5 * i / I) for i in range(I + 1)]
    return [ScaleBand(i, edges[i - 1], edges[i]) for i in range(1, I + 1)]


def mms_single_scale(F: Union[GrayImage16, np.ndarray], band: ScaleBand, n_orientations: int) -> GrayImage32:
    px = F.pixels if isinstance(F, GrayImage16) else np.asarray(F, dtype=np.uint16)
    acc = np.zeros(px.shape, dtype=np.uint32)
    for angle in orientation_angles(n_orientations):
        wide = make_line_se(band.m2_rounded, angle)
        narrow = make_line_se(band.m1_rounded, angle)
        residue = px - open_array(px, wide)  # opening is anti-extensive, no wrap
        acc += open_array(residue, narrow)
    return GrayImage32(acc)


def sift(F: GrayImage16, cfg: SiftConfig) -> SiftOutput:
    return SiftOutput([mms_single_scale(F, b, cfg.num_orientations) for b in compute_scale_bands(cfg)], cfg)


def scale_to_8bit(img: Union[GrayImage16, GrayImage32, np.ndarray],
                  region: Optional[BinaryMask] = None) -> np.ndarray:
    """Affine map of the region's [min, max] onto [0, 255], rounding half up.

    Pixels outside the region use the same map and are clamped.  A constant
    region maps everything to 0.
    """
    px = np.asarray(getattr(img, "pixels", img)).astype(np.int64)
    if px.size == 0:
        raise ValueError("empty raster")
    if region is None:
        sample = px
    else:
        if region.bits.shape != px.shape:
            raise ValueError(f"region shape {region.bits.shape} != image shape {px.shape}")
        sample = px[region.bits]
        if sample.size == 0:
            raise ValueError("scaling region is empty")
    lo, hi = int(sample.min()), int(sample.max())
    if hi == lo:
        return np.zeros(px.shape, dtype=np.uint8)
    span = hi - lo
    out = ((px - lo) * 510 + span) // (2 * span)
    return np.clip(out, 0, 255).astype(np.uint8)


def compose_pcm(gm: GrayImage16, bands: SiftOutput, breast_mask: Optional[BinaryMask] = None) -> PseudoColorImage:
    """Grayscale in red, scale-1 band in green, scale-2 band in blue."""
    if len(bands.bands) != 2:
        raise UnsupportedConfigError(f"pseudo-color composition needs exactly 2 scales, got {len(bands.bands)}")
    for b in bands.bands:
        if b.pixels.shape != gm.pixels.shape:
            raise ValueError("band and image dimensions differ")
    return PseudoColorImage(
        r=scale_to_8bit(gm, breast_mask),
        g=scale_to_8bit(bands.bands[0], breast_mask),
        b=scale_to_8bit(bands.bands[1], breast_mask),
    )


def band_to_display16(band: GrayImage32, n_orientations: int) -> GrayImage16:
    """Orientation-averaged band (sum / N, rounded half up) clamped to 16 bits."""
    px = band.pixels.astype(np.uint64)
    out = (2 * px + n_orientations) // (2 * n_orientations)
    return GrayImage16(np.minimum(out, 65535).astype(np.uint16))


def write_band_raw(band: GrayImage32, path) -> None:
    """Flat sidecar: width, height (uint32 LE) then uint32 LE samples, row-major."""
    h, w = band.pixels.shape
    with open(path, "wb") as fh:
        fh.write(np.array([w, h], dtype="<u4").tobytes())
        fh.write(band.pixels.astype("<u4").tobytes())


def read_band_raw(path) -> GrayImage32:
    data = open(path, "rb").read()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated band header")
    w, h = np.frombuffer(data[:8], dtype="<u4")
    if len(data) != 8 + 4 * int(w) * int(h):
        raise ValueError(f"{path}: payload size does not match {w}x{h}")
    return GrayImage32(np.frombuffer(data[8:], dtype="<u4").reshape(int(h), int(w)).astype(np.uint32))
