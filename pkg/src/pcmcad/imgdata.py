"""Raster data model, image/annotation I/O and dataset manifests.

All rasters are stored as 2-D numpy arrays indexed ``[row, col]`` (row-major).
Supported on-disk formats:

* 16-bit single-channel PGM (``P5``, two big-endian bytes per sample)
* 16-bit grayscale PNG
* 8-bit RGB PNG (pseudo-color output)
* 8-bit label PNG (annotations, binary masks)
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

PathLike = Union[str, Path]

DEFAULT_PIXEL_SIZE_MM = 0.07
FOLD_ROLES = ("train", "validation", "test")


class ImageFormatError(ValueError):
    """The file exists but cannot be decoded as a supported raster."""


class UnsupportedBitDepthError(ImageFormatError):
    pass


class CorruptHeaderError(ImageFormatError):
    pass


class AnnotationError(ValueError):
    pass


class ManifestError(ValueError):
    """Manifest validation failure; ``location`` names the offending entry."""

    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


# ---------------------------------------------------------------------------
# Raster types
# ---------------------------------------------------------------------------

def _as_raster(arr, dtype, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype != dtype:
        if arr.size and (np.issubdtype(arr.dtype, np.floating) or arr.min() < 0
                         or arr.max() > np.iinfo(dtype).max):
            raise ValueError(f"{name} values do not fit in {np.dtype(dtype).name}")
        arr = arr.astype(dtype)
    return np.ascontiguousarray(arr)


@dataclass(frozen=True, eq=False)
class GrayImage16:
    pixels: np.ndarray
    pixel_size_mm: float = DEFAULT_PIXEL_SIZE_MM

    def __post_init__(self):
        object.__setattr__(self, "pixels", _as_raster(self.pixels, np.uint16, "pixels"))
        if not self.pixel_size_mm > 0:
            raise ValueError(f"pixel_size_mm must be > 0, got {self.pixel_size_mm}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GrayImage16):
            return NotImplemented
        return (self.pixel_size_mm == other.pixel_size_mm
                and np.array_equal(self.pixels, other.pixels))


@dataclass(frozen=True, eq=False)
class GrayImage32:
    """Overflow-safe accumulator raster (orientation sums)."""

    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _as_raster(self.pixels, np.uint32, "pixels"))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GrayImage32):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        object.__setattr__(self, "bits", np.ascontiguousarray(bits, dtype=bool))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @classmethod
    def full(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.ones((height, width), dtype=bool))

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)


@dataclass(frozen=True, eq=False)
class PseudoColorImage:
    r: np.ndarray
    g: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        chans = [_as_raster(c, np.uint8, name) for c, name in
                 ((self.r, "r"), (self.g, "g"), (self.b, "b"))]
        if not (chans[0].shape == chans[1].shape == chans[2].shape):
            raise ValueError("channel arrays differ in size: "
                             + ", ".join(str(c.shape) for c in chans))
        for name, c in zip("rgb", chans):
            object.__setattr__(self, name, c)

    @property
    def width(self) -> int:
        return self.r.shape[1]

    @property
    def height(self) -> int:
        return self.r.shape[0]

    def to_array(self) -> np.ndarray:
        """Stacked ``(height, width, 3)`` uint8 array."""
        return np.stack([self.r, self.g, self.b], axis=-1)

    def __eq__(self, other):
        if not isinstance(other, PseudoColorImage):
            return NotImplemented
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in "rgb")


@dataclass(frozen=True, eq=False)
class GroundTruthMass:
    mask: BinaryMask
    pixel_size_mm: float

    def __post_init__(self):
        if self.mask.count == 0:
            raise AnnotationError("ground-truth mass has no set pixels")

    @property
    def area_mm2(self) -> float:
        return self.mask.count * self.pixel_size_mm ** 2


# ---------------------------------------------------------------------------
# 16-bit grayscale I/O
# ---------------------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pgm(data: bytes, path: Path) -> np.ndarray:
    if not data.startswith(b"P5"):
        raise CorruptHeaderError(f"{path}: not a binary PGM (magic {data[:2]!r})")
    pos = 2
    fields = []
    for _ in range(3):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise CorruptHeaderError(f"{path}: truncated PGM header")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise CorruptHeaderError(f"{path}: bad PGM header field {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = fields
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise CorruptHeaderError(f"{path}: missing whitespace after PGM header")
    pos += 1
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise CorruptHeaderError(f"{path}: invalid PGM dimensions/maxval {fields}")
    if maxval < 256:
        raise UnsupportedBitDepthError(f"{path}: unsupported bit depth (8-bit PGM, maxval {maxval})")
    need = width * height * 2
    if len(data) - pos < need:
        raise CorruptHeaderError(f"{path}: PGM payload truncated ({len(data) - pos} < {need} bytes)")
    arr = np.frombuffer(data, dtype=">u2", count=width * height, offset=pos)
    return arr.reshape(height, width).astype(np.uint16)


def _write_pgm(arr: np.ndarray, path: Path) -> None:
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(arr.astype(">u2").tobytes())


def _read_png16(path: Path) -> np.ndarray:
    try:
        im = Image.open(path)
        im.load()
    except OSError as exc:
        raise CorruptHeaderError(f"{path}: cannot decode PNG ({exc})") from None
    if im.mode in ("I;16", "I;16B", "I;16L"):
        return np.array(im, dtype=np.uint16)
    if im.mode == "I":
        # Pillow widens some 16-bit files to 32-bit "I"
        arr = np.array(im)
        if arr.min() < 0 or arr.max() > 65535:
            raise UnsupportedBitDepthError(f"{path}: unsupported bit depth (32-bit integer)")
        return arr.astype(np.uint16)
    raise UnsupportedBitDepthError(f"{path}: unsupported bit depth (mode {im.mode}, need 16-bit grayscale)")


def load_gray16(path: PathLike, pixel_size_mm: float = DEFAULT_PIXEL_SIZE_MM) -> GrayImage16:
    """Load a 16-bit PGM or PNG bit-exactly."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(b"P5") or head.startswith(b"P2"):
        if head.startswith(b"P2"):
            raise UnsupportedBitDepthError(f"{path}: ASCII PGM is not supported")
        pixels = _read_pgm(path.read_bytes(), path)
    elif head.startswith(b"\x89PNG"):
        pixels = _read_png16(path)
    else:
        raise CorruptHeaderError(f"{path}: unrecognised image header {head[:4]!r}")
    return GrayImage16(pixels, pixel_size_mm)


def save_gray16(img: GrayImage16, path: PathLike, compress_level: int = 6) -> None:
    """Write ``img`` as PGM (``.pgm``) or 16-bit PNG (anything else)."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        _write_pgm(img.pixels, path)
    else:
        Image.fromarray(img.pixels).save(path, format="PNG", compress_level=compress_level)


def save_rgb8(img: PseudoColorImage, path: PathLike) -> None:
    Image.fromarray(img.to_array()).save(Path(path), format="PNG")


def load_rgb8(path: PathLike) -> PseudoColorImage:
    im = Image.open(path)
    if im.mode != "RGB":
        raise UnsupportedBitDepthError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
    arr = np.array(im)
    return PseudoColorImage(arr[..., 0], arr[..., 1], arr[..., 2])


def save_mask(mask: BinaryMask, path: PathLike) -> None:
    Image.fromarray(mask.bits.astype(np.uint8) * 255).save(Path(path), format="PNG")


def _read_label_png(path: Path) -> np.ndarray:
    im = Image.open(path)
    if im.mode == "1":
        im = im.convert("L")
    if im.mode not in ("L", "P"):
        raise UnsupportedBitDepthError(f"{path}: label image must be 8-bit, got mode {im.mode}")
    return np.array(im)


def load_mask(path: PathLike) -> BinaryMask:
    return BinaryMask(_read_label_png(Path(path)) > 0)


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------

def rasterize_polygon(polygon: Sequence[Sequence[float]], width: int, height: int) -> np.ndarray:
    """Even-odd fill; pixel ``(r, c)`` is set when its centre ``(c+.5, r+.5)`` is inside."""
    pts = np.asarray(polygon, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise AnnotationError(f"polygon needs >= 3 [x, y] vertices, got {len(pts)}")
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    out = np.zeros((height, width), dtype=bool)
    xc = np.arange(width) + 0.5
    for r in range(height):
        yc = r + 0.5
        crosses = (y0 > yc) != (y1 > yc)
        if not crosses.any():
            continue
        xs = x0[crosses] + (yc - y0[crosses]) * (x1[crosses] - x0[crosses]) / (y1[crosses] - y0[crosses])
        # parity of crossings strictly to the right of each centre
        n_right = (xs[None, :] > xc[:, None]).sum(axis=1)
        out[r] = (n_right % 2) == 1
    return out


def load_annotation(path: PathLike, width: int, height: int,
                    pixel_size_mm: float = DEFAULT_PIXEL_SIZE_MM) -> List[GroundTruthMass]:
    """Load masses from a label PNG or a JSON polygon document."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    raw = path.read_bytes()
    if not raw.strip():
        return []
    if raw.startswith(b"\x89PNG"):
        labels = _read_label_png(path)
        if labels.shape != (height, width):
            raise AnnotationError(f"{path}: label image size {labels.shape[::-1]} "
                                  f"does not match image size {(width, height)}")
        return [GroundTruthMass(BinaryMask(labels == v), pixel_size_mm)
                for v in np.unique(labels) if v != 0]
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON ({exc})") from None
    masses = doc.get("masses") if isinstance(doc, dict) else None
    if not isinstance(masses, list):
        raise AnnotationError(f'{path}: expected {{"masses": [...]}}')
    out = []
    for i, m in enumerate(masses):
        try:
            bits = rasterize_polygon(m["polygon"], width, height)
        except (KeyError, TypeError):
            raise AnnotationError(f"{path}: masses[{i}] has no polygon") from None
        except AnnotationError as exc:
            raise AnnotationError(f"{path}: masses[{i}]: {exc}") from None
        if not bits.any():
            raise AnnotationError(f"{path}: masses[{i}] rasterizes to zero pixels")
        out.append(GroundTruthMass(BinaryMask(bits), pixel_size_mm))
    return out


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    annotation_path: Optional[Path]
    split_id: int
    fold_role: str

    @property
    def stem(self) -> str:
        return self.image_path.stem


@dataclass(frozen=True)
class DatasetManifest:
    entries: Tuple[ManifestEntry, ...]
    pixel_size_mm: float = DEFAULT_PIXEL_SIZE_MM
    source: Optional[Path] = field(default=None, compare=False)

    @property
    def split_ids(self) -> List[int]:
        return sorted({e.split_id for e in self.entries})

    def select(self, split_id: Optional[int] = None, role: Optional[str] = None) -> List[ManifestEntry]:
        return [e for e in self.entries
                if (split_id is None or e.split_id == split_id)
                and (role is None or e.fold_role == role)]


def parse_manifest(doc, base_dir: PathLike = ".") -> DatasetManifest:
    """Validate a manifest document; any defect raises :class:`ManifestError`."""
    base = Path(base_dir)
    if not isinstance(doc, dict):
        raise ManifestError("$", "manifest must be a JSON object")
    unknown = set(doc) - {"pixel_size_mm", "splits"}
    if unknown:
        raise ManifestError("$", f"unknown keys {sorted(unknown)}")
    px = doc.get("pixel_size_mm", DEFAULT_PIXEL_SIZE_MM)
    if isinstance(px, (list, tuple)):
        raise ManifestError("pixel_size_mm", "anisotropic pixel spacing is not supported")
    if not isinstance(px, (int, float)) or isinstance(px, bool) or not px > 0:
        raise ManifestError("pixel_size_mm", f"must be a positive number, got {px!r}")
    splits = doc.get("splits")
    if not isinstance(splits, list):
        raise ManifestError("splits", "must be a list")
    entries = []
    seen_ids = set()
    for si, split in enumerate(splits):
        loc = f"splits[{si}]"
        if not isinstance(split, dict):
            raise ManifestError(loc, "must be an object")
        sid = split.get("id")
        if not isinstance(sid, int) or isinstance(sid, bool) or sid < 0:
            raise ManifestError(f"{loc}.id", f"must be a non-negative integer, got {sid!r}")
        if sid in seen_ids:
            raise ManifestError(f"{loc}.id", f"duplicate split id {sid}")
        seen_ids.add(sid)
        items = split.get("entries")
        if not isinstance(items, list):
            raise ManifestError(f"{loc}.entries", "must be a list")
        seen_images = set()
        for ei, item in enumerate(items):
            eloc = f"{loc}.entries[{ei}]"
            if not isinstance(item, dict):
                raise ManifestError(eloc, "must be an object")
            extra = set(item) - {"image", "annotation", "role"}
            if extra:
                raise ManifestError(eloc, f"unknown keys {sorted(extra)}")
            image = item.get("image")
            if not isinstance(image, str) or not image:
                raise ManifestError(f"{eloc}.image", "must be a non-empty path string")
            ann = item.get("annotation")
            if ann is not None and (not isinstance(ann, str) or not ann):
                raise ManifestError(f"{eloc}.annotation", "must be a path string or null")
            role = item.get("role")
            if role not in FOLD_ROLES:
                raise ManifestError(f"{eloc}.role", f"must be one of {FOLD_ROLES}, got {role!r}")
            img_path = (base / image).resolve()
            if img_path in seen_images:
                raise ManifestError(f"{eloc}.image", f"duplicate image {image!r} within split {sid}")
            seen_images.add(img_path)
            entries.append(ManifestEntry(img_path, None if ann is None else (base / ann).resolve(),
                                         sid, role))
    return DatasetManifest(tuple(entries), float(px))


def load_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such manifest")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError("$", f"invalid JSON ({exc})") from None
    m = parse_manifest(doc, path.parent)
    return DatasetManifest(m.entries, m.pixel_size_mm, source=path.resolve())
