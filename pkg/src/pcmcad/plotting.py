"""Matplotlib figures for reports: FROC overlay and pseudo-color panels."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)

GRID_KWARGS = dict(linestyle="-", color="black", linewidth=0.5, alpha=0.3)
CURVE_KWARGS = dict(linewidth=1.5, drawstyle="default")
POINT_KWARGS = dict(marker="o", markersize=5, linestyle="none")

# fixed metadata keeps repeated renders byte-stable
_PNG_METADATA = {"Software": None}


def plot_froc(curves: Dict[int, "FrocCurve"], report: Optional["EvalReport"], path,
              fpi_max: Optional[float] = None, dpi: int = 120) -> Path:
    from .evaluation import tpr_at_fpi

    protocol = report.protocol if report is not None else {}
    fpi_ref = float(protocol.get("fpi_ref", 0.9))
    if fpi_max is None:
        fpi_max = float(protocol.get("aufc_range", (0.0, 5.0))[1])

    fig, ax = plt.subplots(figsize=(5, 4))
    for sid, curve in sorted(curves.items()):
        f = np.concatenate(([0.0] if curve.fpi[0] > 0 else [], curve.fpi, [fpi_max]))
        t = np.concatenate(([0.0] if curve.fpi[0] > 0 else [], curve.tpr, [curve.tpr[-1]]))
        line, = ax.plot(f, t, label=f"split {sid}", **CURVE_KWARGS)
        ax.plot([fpi_ref], [tpr_at_fpi(curve, fpi_ref)], color=line.get_color(), **POINT_KWARGS)
    ax.axvline(fpi_ref, color="grey", linestyle=":", linewidth=1)
    ax.set_xlim(0, fpi_max)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("false positives per image")
    ax.set_ylabel("true positive rate")
    if report is not None and report.aggregate.get("tpr_at_ref_fpi", {}).get("mean") is not None:
        agg = report.aggregate["tpr_at_ref_fpi"]
        ax.set_title(f"TPR@{fpi_ref:g} FPI = {agg['mean']:.2f} ± {agg['std']:.2f}", fontsize=10)
    ax.grid(True, **GRID_KWARGS)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=dpi, metadata=_PNG_METADATA)
    plt.close(fig)
    logger.debug("wrote %s", path)
    return path


def plot_pcm_panel(gray: np.ndarray, pcm: "PseudoColorImage", path, title: str = "",
                   outlines=(), dpi: int = 100) -> Path:
    """Grayscale next to its pseudo-color rendering; optional mask outlines."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    axes[0].imshow(gray, cmap="gray")
    axes[0].set_title("grayscale", fontsize=9)
    axes[1].imshow(pcm.to_array())
    axes[1].set_title("pseudo-color", fontsize=9)
    for bits, colour in outlines:
        for ax in axes:
            ax.contour(bits.astype(float), levels=[0.5], colors=[colour], linewidths=0.8)
    for ax in axes:
        ax.set_axis_off()
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=dpi, metadata=_PNG_METADATA)
    plt.close(fig)
    return path
