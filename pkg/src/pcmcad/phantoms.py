"""Synthetic rasters: disc phantoms and a small mammogram-like dataset.

The dataset is fully determined by its seed, so pipeline runs on it are
reproducible byte for byte.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image

from .imgdata import GrayImage16, save_gray16


def disc_mask(size: int, diameter: float, center: Tuple[float, float] = None) -> np.ndarray:
    """Pixels whose centre lies within ``diameter / 2`` of ``center`` (default: image centre)."""
    cy, cx = center if center is not None else ((size - 1) / 2, (size - 1) / 2)
    yy, xx = np.mgrid[:size, :size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= (diameter / 2) ** 2


def disc_phantom(size: int, diameter: float, intensity: int = 10000,
                 center: Tuple[float, float] = None) -> np.ndarray:
    return disc_mask(size, diameter, center).astype(np.uint16) * np.uint16(intensity)


@dataclass(frozen=True)
class PhantomMass:
    row: float
    col: float
    diameter_mm: float
    contrast: float = 5000.0


@dataclass(frozen=True)
class PhantomSpec:
    name: str
    masses: Tuple[PhantomMass, ...]
    annotation_format: str = "json"  # or "png"


HEIGHT, WIDTH = 2048, 1600
PIXEL_SIZE_MM = 0.07
SKIN_ZONE = 0.45

# Every test image carries one mass per sift band; the mass-free cases only
# appear under train / validation roles.
DEFAULT_SPECS: Tuple[PhantomSpec, ...] = (
    PhantomSpec("case00", (PhantomMass(700, 520, 8.0), PhantomMass(1300, 560, 20.0))),
    PhantomSpec("case01", (PhantomMass(1350, 420, 9.0), PhantomMass(760, 600, 20.0)), "png"),
    PhantomSpec("case02", (PhantomMass(1040, 760, 10.0), PhantomMass(800, 380, 21.0))),
    PhantomSpec("case03", (PhantomMass(720, 440, 9.0), PhantomMass(1380, 560, 20.0))),
    PhantomSpec("case04", (PhantomMass(1200, 700, 8.5), PhantomMass(820, 480, 22.0)), "png"),
    PhantomSpec("case05", (PhantomMass(900, 800, 9.5), PhantomMass(1250, 420, 21.5))),
    PhantomSpec("normal0", ()),
    PhantomSpec("normal1", (), "png"),
)


def mammogram_phantom(spec: PhantomSpec, rng: np.random.Generator) -> Tuple[np.ndarray, List[np.ndarray]]:
    """14-bit breast-like raster plus one boolean mask per mass."""
    yy, xx = np.mgrid[:HEIGHT, :WIDTH].astype(np.float64)
    # breast: blunt half superellipse against the chest wall at column 0
    cy, ry, rx = HEIGHT / 2, 0.47 * HEIGHT, 0.8 * WIDTH
    rho = (np.abs((yy - cy) / ry) ** 3 + (xx / rx) ** 3) ** (1 / 3)
    breast = rho <= 1.0
    # compressed-thickness falloff towards the skin line
    t = np.clip((1.0 - rho) / SKIN_ZONE, 0.0, 1.0)
    tissue = 7800.0 * t * t * (3.0 - 2.0 * t)
    # smooth low-frequency parenchyma
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.0, size=2)
        phase = rng.uniform(0, 2 * math.pi, size=2)
        tissue += 150.0 * np.sin(2 * math.pi * fy * yy / HEIGHT + phase[0]) * \
            np.cos(2 * math.pi * fx * xx / WIDTH + phase[1])
    img = np.where(breast, tissue, 0.0)
    masks = []
    for m in spec.masses:
        radius = m.diameter_mm / PIXEL_SIZE_MM / 2
        r0, r1 = max(0, int(m.row - radius) - 1), min(HEIGHT, int(m.row + radius) + 2)
        c0, c1 = max(0, int(m.col - radius) - 1), min(WIDTH, int(m.col + radius) + 2)
        r = np.hypot(yy[r0:r1, c0:c1] - m.row, xx[r0:r1, c0:c1] - m.col)
        mask = np.zeros((HEIGHT, WIDTH), dtype=bool)
        mask[r0:r1, c0:c1] = r <= radius
        masks.append(mask)
        # projected thickness of a sphere
        img[r0:r1, c0:c1] += m.contrast * np.sqrt(np.clip(1.0 - (r / radius) ** 2, 0.0, 1.0))
    img += rng.normal(0.0, 30.0, size=img.shape) * breast
    img = np.where(breast, img, rng.uniform(0, 40, size=img.shape))
    return np.clip(np.round(img), 0, 16383).astype(np.uint16), masks


def _circle_polygon(mask_row: float, mask_col: float, radius: float, n: int = 96) -> List[List[float]]:
    t = np.linspace(0, 2 * math.pi, n, endpoint=False)
    # pixel (r, c) has its centre at (c + .5, r + .5)
    return [[round(float(mask_col + 0.5 + radius * math.cos(a)), 3),
             round(float(mask_row + 0.5 + radius * math.sin(a)), 3)] for a in t]


def write_phantom_dataset(out_dir, seed: int = 0, specs: Sequence[PhantomSpec] = DEFAULT_SPECS) -> Path:
    """Write images, annotations and a two-split manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names, images = [], {}
    for i, spec in enumerate(specs):
        img, masks = mammogram_phantom(spec, rng)
        # alternate containers so both decoders see real data
        images[spec.name] = f"images/{spec.name}.{'pgm' if i % 2 else 'png'}"
        save_gray16(GrayImage16(img, PIXEL_SIZE_MM), out_dir / images[spec.name], compress_level=1)
        if spec.annotation_format == "png":
            labels = np.zeros(img.shape, dtype=np.uint8)
            for i, mk in enumerate(masks, start=1):
                labels[mk] = i
            ann = out_dir / "annotations" / f"{spec.name}.png"
            Image.fromarray(labels).save(ann)
        else:
            ann = out_dir / "annotations" / f"{spec.name}.json"
            polys = [{"polygon": _circle_polygon(m.row, m.col, m.diameter_mm / PIXEL_SIZE_MM / 2)}
                     for m in spec.masses]
            ann.write_text(json.dumps({"masses": polys}, indent=1) + "\n")
        names.append(spec.name)

    with_mass = [sp.name for sp in specs if sp.masses]
    half = len(with_mass) // 2
    splits = []
    for sid, test in enumerate((with_mass[:half], with_mass[half:])):
        rest = [n for n in names if n not in test]
        entries = [{"image": images[n], "annotation": _ann_path(out_dir, n), "role": "test"}
                   for n in test]
        for i, n in enumerate(rest):
            entries.append({"image": images[n], "annotation": _ann_path(out_dir, n),
                            "role": "validation" if i == 0 else "train"})
        splits.append({"id": sid, "entries": entries})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"pixel_size_mm": PIXEL_SIZE_MM, "splits": splits}, indent=2) + "\n")
    return manifest


def _ann_path(out_dir: Path, name: str) -> str:
    for ext in ("json", "png"):
        if (out_dir / "annotations" / f"{name}.{ext}").exists():
            return f"annotations/{name}.{ext}"
    raise FileNotFoundError(name)
