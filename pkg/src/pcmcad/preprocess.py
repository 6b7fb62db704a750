"""Mammogram pre-processing: breast extraction, crop, 16-bit normalisation,
square padding and factor-4 wavelet subsampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from .imgdata import BinaryMask, GrayImage16

RESIZE_FACTOR = 4

# db2 analysis low-pass in convolution order, rescaled so the taps sum to 1
_SQ3 = math.sqrt(3.0)
DB2_LOWPASS = np.array([(1 - _SQ3) / 8, (3 - _SQ3) / 8, (3 + _SQ3) / 8, (1 + _SQ3) / 8])


class DegenerateInputError(ValueError):
    pass


def otsu_threshold(values: np.ndarray) -> int:
    """Otsu threshold over the full 16-bit histogram.

    Pixels ``<= t`` form the background class.  Ties between thresholds with
    equal between-class variance resolve to the smallest ``t``.
    """
    hist = np.bincount(values.ravel(), minlength=65536).astype(np.float64)
    levels = np.nonzero(hist)[0]
    if len(levels) < 2:
        raise DegenerateInputError("image is constant; no foreground can be separated")
    lo, hi = levels[0], levels[-1]
    h = hist[lo:hi + 1]
    g = np.arange(lo, hi + 1, dtype=np.float64)
    w0 = np.cumsum(h)[:-1]
    s0 = np.cumsum(h * g)[:-1]
    total, stotal = h.sum(), (h * g).sum()
    w1 = total - w0
    mu0 = s0 / w0
    mu1 = (stotal - s0) / w1
    between = w0 * w1 * (mu0 - mu1) ** 2
    return int(lo + np.argmax(between))


def extract_breast_region(img: GrayImage16) -> BinaryMask:
    """Largest 8-connected foreground component above the Otsu level, holes filled."""
    px = img.pixels
    if px.size == 0:
        raise DegenerateInputError("empty image")
    fg = px > otsu_threshold(px)
    labels, n = ndimage.label(fg, structure=np.ones((3, 3), dtype=bool))
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    largest = labels == int(np.argmax(sizes))
    # default structure is the 4-connected cross, so background is 4-connected
    return BinaryMask(ndimage.binary_fill_holes(largest))


def mask_bbox(mask: BinaryMask) -> Tuple[int, int, int, int]:
    """Inclusive ``(row0, col0, row1, col1)`` box of the set pixels."""
    rows = np.flatnonzero(mask.bits.any(axis=1))
    cols = np.flatnonzero(mask.bits.any(axis=0))
    if len(rows) == 0:
        raise DegenerateInputError("mask is empty")
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def crop_to_mask(img: GrayImage16, mask: BinaryMask) -> Tuple[GrayImage16, Tuple[int, int]]:
    r0, c0, r1, c1 = mask_bbox(mask)
    return GrayImage16(img.pixels[r0:r1 + 1, c0:c1 + 1], img.pixel_size_mm), (r0, c0)


def normalize_16bit(img: GrayImage16) -> GrayImage16:
    """Min-max rescale to [0, 65535], rounding half up; constant images map to zero."""
    px = img.pixels.astype(np.int64)
    lo, hi = int(px.min()), int(px.max())
    if hi == lo:
        return GrayImage16(np.zeros_like(img.pixels), img.pixel_size_mm)
    span = hi - lo
    out = ((px - lo) * 65535 * 2 + span) // (2 * span)
    return GrayImage16(out.astype(np.uint16), img.pixel_size_mm)


def pad_square(img: GrayImage16) -> GrayImage16:
    side = max(img.width, img.height)
    out = np.zeros((side, side), dtype=np.uint16)
    out[:img.height, :img.width] = img.pixels
    return GrayImage16(out, img.pixel_size_mm)


def _lowpass_decimate(x: np.ndarray, axis: int) -> np.ndarray:
    # filtered[n] = sum_k taps[k] * x[n + 1 - k], half-point symmetric extension,
    # keep even n
    n = x.shape[axis]
    pad = [(0, 0)] * x.ndim
    pad[axis] = (2, 1)
    xe = np.pad(x, pad, mode="symmetric")
    out = 0.0
    for k, tap in enumerate(DB2_LOWPASS):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(3 - k, 3 - k + n, 2)
        out = out + tap * xe[tuple(sl)]
    return out


def wavelet_downsample(img: GrayImage16, levels: int = 2) -> GrayImage16:
    """LL subband of a ``levels``-deep separable db2 transform (side ceil(side / 2**levels))."""
    if img.width != img.height:
        raise ValueError(f"wavelet_downsample needs a square image, got {img.width}x{img.height}")
    if img.width < 8:
        raise ValueError(f"image side must be >= 8, got {img.width}")
    x = img.pixels.astype(np.float64)
    for _ in range(levels):
        x = _lowpass_decimate(_lowpass_decimate(x, 0), 1)
    out = np.clip(np.floor(x + 0.5), 0, 65535).astype(np.uint16)
    return GrayImage16(out, img.pixel_size_mm * 2 ** levels)


def decimate_mask(bits: np.ndarray, factor: int = RESIZE_FACTOR, rule: str = "any") -> np.ndarray:
    """Block-reduce a boolean raster by ``factor``; edge blocks are zero-padded.

    ``rule="any"`` ORs each block, ``rule="majority"`` keeps blocks at least
    half covered.
    """
    h, w = bits.shape
    oh, ow = -(-h // factor), -(-w // factor)
    padded = np.zeros((oh * factor, ow * factor), dtype=np.uint16)
    padded[:h, :w] = bits
    counts = padded.reshape(oh, factor, ow, factor).sum(axis=(1, 3))
    if rule == "any":
        return counts > 0
    if rule == "majority":
        return counts * 2 >= factor * factor
    raise ValueError(f"unknown rule {rule!r}")


@dataclass(frozen=True)
class PreprocessResult:
    image: GrayImage16
    breast_mask: BinaryMask
    crop_offset: Tuple[int, int]
    crop_shape: Tuple[int, int]
    padded_side: int
    effective_pixel_size_mm: float

    def to_working(self, bits: np.ndarray) -> np.ndarray:
        """Map a full-resolution mask into the working (cropped, padded, /4) frame.

        Blocks at least half covered are kept; a mask that would vanish keeps
        every touched block instead.
        """
        r0, c0 = self.crop_offset
        h, w = self.crop_shape
        sq = np.zeros((self.padded_side, self.padded_side), dtype=bool)
        sq[:h, :w] = bits[r0:r0 + h, c0:c0 + w]
        out = decimate_mask(sq, RESIZE_FACTOR, "majority")
        if not out.any():
            out = decimate_mask(sq, RESIZE_FACTOR, "any")
        return out

    def sidecar(self) -> dict:
        return {
            "crop_offset": list(self.crop_offset),
            "crop_shape": list(self.crop_shape),
            "padded_side": self.padded_side,
            "working_side": self.image.width,
            "effective_pixel_size_mm": self.effective_pixel_size_mm,
        }


def preprocess(img: GrayImage16) -> PreprocessResult:
    """extract -> crop -> normalise -> pad -> two-level wavelet subsample."""
    mask = extract_breast_region(img)
    cropped, offset = crop_to_mask(img, mask)
    squared = pad_square(normalize_16bit(cropped))
    small = wavelet_downsample(squared)
    r0, c0 = offset
    sq_mask = np.zeros((squared.height, squared.width), dtype=bool)
    sq_mask[:cropped.height, :cropped.width] = mask.bits[r0:r0 + cropped.height, c0:c0 + cropped.width]
    return PreprocessResult(
        image=small,
        breast_mask=BinaryMask(decimate_mask(sq_mask, RESIZE_FACTOR, "any")),
        crop_offset=offset,
        crop_shape=(cropped.height, cropped.width),
        padded_side=squared.width,
        effective_pixel_size_mm=img.pixel_size_mm * RESIZE_FACTOR,
    )
