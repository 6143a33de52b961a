"""Final saliency assembly and post-processing.

A map is built by multiplying the input-layer gradient with the image and
summing over channels. Maps stay signed internally; negative truncation
is applied at export or evaluation time.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attribution import AttributionState
from .forward import ActivationTrace
from .ppm import write_pgm, write_ppm


class SaliencyError(ValueError):
    pass


@dataclass(frozen=True)
class SaliencyMap:
    """Signed per-pixel saliency at input resolution, with provenance."""

    values: np.ndarray
    target: int
    alpha: float
    rule_set: str
    model: str = ""

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float32, copy=True)
        if arr.ndim != 2:
            raise SaliencyError(f"saliency map must be 2-D, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel box (x0, y0) .. (x1, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise SaliencyError(f"degenerate box {self}")

    def iou(self, other: "BBox") -> float:
        ix0, iy0 = max(self.x0, other.x0), max(self.y0, other.y0)
        ix1, iy1 = min(self.x1, other.x1), min(self.y1, other.y1)
        if ix0 > ix1 or iy0 > iy1:
            return 0.0
        inter = (ix1 - ix0 + 1) * (iy1 - iy0 + 1)
        a = (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
        b = (other.x1 - other.x0 + 1) * (other.y1 - other.y0 + 1)
        return inter / (a + b - inter)

    def contains(self, row: int, col: int, margin: int = 0) -> bool:
        return (
            self.x0 - margin <= col <= self.x1 + margin
            and self.y0 - margin <= row <= self.y1 + margin
        )


def assemble(state: AttributionState, trace: ActivationTrace) -> SaliencyMap:
    """Gradient times image, summed over channels."""
    if state.input_gradient is None:
        raise SaliencyError(
            "attribution state holds no input-layer gradient "
            "(was a stop_layer set?)"
        )
    prod = state.input_gradient.data * trace.image.data
    values = prod.sum(axis=1)[0]
    return SaliencyMap(
        values=values,
        target=state.request.target,
        alpha=state.request.alpha,
        rule_set=state.request.rule_set,
    )


def truncate_negatives(m: SaliencyMap) -> SaliencyMap:
    return replace(m, values=np.maximum(m.values, 0.0))


def binarize_bbox(m: SaliencyMap, threshold_fraction: float) -> BBox:
    """Tight box around every pixel at or above threshold_fraction times
    the map maximum (after negative truncation). No connected-component
    filtering is applied."""
    if not 0.0 < threshold_fraction < 1.0:
        raise SaliencyError(
            f"threshold fraction must lie in (0, 1), got {threshold_fraction}"
        )
    pos = np.maximum(m.values, 0.0)
    peak = float(pos.max())
    if peak == 0.0:
        raise SaliencyError("cannot binarize an all-zero saliency map")
    mask = pos >= threshold_fraction * peak
    rows, cols = np.nonzero(mask)
    return BBox(int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max()))


def argmax_point(m: SaliencyMap) -> tuple[int, int]:
    """(row, col) of the map maximum; ties go to the first cell in
    row-major order."""
    idx = int(np.argmax(m.values))
    h, w = m.values.shape
    return idx // w, idx % w


def export_image(m: SaliencyMap, path, mode: str = "grayscale") -> None:
    """Renders the map as PGM (grayscale, min-max normalised) or PPM
    (signed-diverging: positives red, negatives blue)."""
    if mode == "grayscale":
        v = m.values.astype(np.float64)
        lo, hi = float(v.min()), float(v.max())
        if hi > lo:
            scaled = (v - lo) / (hi - lo) * 255.0
        else:
            scaled = np.full_like(v, 128.0)
        write_pgm(path, np.rint(scaled).astype(np.uint8))
    elif mode == "signed-diverging":
        v = m.values.astype(np.float64)
        scale = float(np.abs(v).max())
        h, w = v.shape
        rgb = np.zeros((h, w, 3), dtype=np.uint8)
        if scale > 0:
            rgb[:, :, 0] = np.rint(np.maximum(v, 0.0) / scale * 255.0).astype(np.uint8)
            rgb[:, :, 2] = np.rint(np.maximum(-v, 0.0) / scale * 255.0).astype(np.uint8)
        write_ppm(path, rgb)
    else:
        raise SaliencyError(f"unknown export mode {mode!r}")
