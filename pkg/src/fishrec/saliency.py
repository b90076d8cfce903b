"""Phase-only Fourier saliency and top-K keypoints for part initialization."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import Rect, clamp_rect, fit_size_to_center, to_gray, write_image


class InitFailure(ValueError):
    """Raised when an image does not contain enough salient points to seed K parts."""


@dataclass(frozen=True)
class SaliencyConfig:
    sigma: float = 1.0
    nms_radius: int = 8
    init_part_side: int = 48

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.nms_radius < 1:
            raise ValueError("nms_radius must be >= 1")
        if self.init_part_side < 1:
            raise ValueError("init_part_side must be >= 1")


def pft_saliency(image: np.ndarray, cfg: SaliencyConfig = SaliencyConfig()) -> np.ndarray:
    """Squared magnitude of the phase-only reconstruction, Gaussian smoothed.

    The transform runs at the native image size (no padding) and the blur
    wraps around, so the map is exactly shift-equivariant under circular
    shifts of the input.
    """
    gray = to_gray(np.asarray(image, dtype=np.float64))
    spectrum = np.fft.fft2(gray)
    mag = np.abs(spectrum)
    # bins without energy carry no phase; a constant image has no saliency
    live = mag > 1e-12 * max(float(mag.max()), 1e-300)
    phase_only = np.where(live, spectrum / np.where(live, mag, 1.0), 0.0)
    recon = np.fft.ifft2(phase_only)
    power = recon.real ** 2 + recon.imag ** 2
    smooth = ndimage.gaussian_filter(power, cfg.sigma, mode="wrap")
    return np.maximum(smooth, 0.0)


def nonmax_suppress(sal: np.ndarray, mask: np.ndarray,
                    cfg: SaliencyConfig = SaliencyConfig()) -> list[tuple[tuple[int, int], float]]:
    """Local maxima of ``sal`` inside ``mask``, as ``((row, col), value)`` sorted by value.

    Background pixels are excluded before the maximum filter, so maxima are
    taken over the object only, and windows without any variation are skipped.  Plateaus and near neighbours are resolved
    greedily in (value desc, row, col) order, keeping points more than
    ``nms_radius`` apart.
    """
    mask = np.asarray(mask, dtype=bool)
    if sal.shape != mask.shape:
        raise ValueError("saliency map and mask dimensions differ")
    if not mask.any():
        return []
    r = cfg.nms_radius
    masked = np.where(mask, sal, -np.inf)
    local_max = ndimage.maximum_filter(masked, size=2 * r + 1, mode="constant", cval=-np.inf)
    # a flat window is not a maximum; a plateau must rise above something nearby
    local_min = ndimage.minimum_filter(np.where(mask, sal, np.inf), size=2 * r + 1,
                                       mode="constant", cval=np.inf)
    rows, cols = np.nonzero((masked == local_max) & (masked > local_min) & mask)
    vals = sal[rows, cols]
    order = np.lexsort((cols, rows, -vals))
    kept: list[tuple[tuple[int, int], float]] = []
    kept_xy = np.empty((0, 2))
    r2 = float(r * r)
    for idx in order:
        p = np.array([rows[idx], cols[idx]], dtype=float)
        if kept_xy.size and np.min(np.sum((kept_xy - p) ** 2, axis=1)) <= r2:
            continue
        kept.append(((int(rows[idx]), int(cols[idx])), float(vals[idx])))
        kept_xy = np.vstack([kept_xy, p])
    return kept


def keypoint_rect(row: int, col: int, shape: tuple[int, ...], side: int,
                  mask: np.ndarray | None = None) -> Rect:
    """Square part of ``side`` pixels centred on pixel ``(row, col)``, made feasible.

    The rect is first clamped (center shift).  If that moves the center off
    the object, the rect is instead shrunk around the keypoint.
    """
    height, width = shape[:2]
    raw = Rect((col + 0.5) / width, (row + 0.5) / height, side / width, side / height)
    rect = clamp_rect(raw)
    if mask is not None:
        c = min(int(rect.cx * width), width - 1)
        rr = min(int(rect.cy * height), height - 1)
        if not mask[rr, c]:
            rect = fit_size_to_center(raw.with_size(min(raw.w, 1.0), min(raw.h, 1.0)))
    return rect


def init_parts(sal: np.ndarray, mask: np.ndarray, k: int,
               cfg: SaliencyConfig = SaliencyConfig()) -> list[Rect]:
    """Rects of ``cfg.init_part_side`` pixels at the top-``k`` saliency maxima."""
    peaks = nonmax_suppress(sal, mask, cfg)
    if len(peaks) < k:
        raise InitFailure(f"only {len(peaks)} salient maxima inside the mask, need {k}")
    return [keypoint_rect(r, c, sal.shape, cfg.init_part_side, mask) for (r, c), _ in peaks[:k]]


def top_saliency_sum(sal: np.ndarray, mask: np.ndarray, k: int,
                     cfg: SaliencyConfig = SaliencyConfig()) -> float:
    peaks = nonmax_suppress(sal, mask, cfg)
    return float(sum(v for _, v in peaks[:k]))


def dump_debug(sal: np.ndarray, keypoints, out_png: str | Path, out_csv: str | Path) -> None:
    """Write the map as an 8-bit grayscale PNG and the keypoints as ``row,col,value`` CSV."""
    peak = sal.max()
    write_image(out_png, sal / peak if peak > 0 else sal)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "value"])
        for (r, c), v in keypoints:
            w.writerow([r, c, repr(v)])
