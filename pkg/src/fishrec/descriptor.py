"""Part appearance descriptor, correlation distance and feature assembly.

A part descriptor is the concatenation of

* dense gradient-orientation descriptors (4x4 cells x 8 orientations, one
  every 4 pixels on a 48x48 canvas) reduced to 128 dimensions by PCA, and
* a kernel-weighted color histogram (8x4x4 HSV bins, or 32 intensity bins
  for grayscale images),

each block L2-normalized, then the whole vector unit-normalized.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import cv2
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import Rect, crop_region, pixel_box, to_gray

CANVAS = 48
CELL = 4
CELLS_PER_DESC = 4
ORIENT_BINS = 8
PCA_DIM = 128
HSV_BINS = (8, 4, 4)
GRAY_BINS = 32
SIFT_CLIP = 0.2

FULL_RECT = Rect(0.5, 0.5, 1.0, 1.0)


def hist_dim(color: bool) -> int:
    return int(np.prod(HSV_BINS)) if color else GRAY_BINS


def descriptor_dim(color: bool) -> int:
    return PCA_DIM + hist_dim(color)


def feature_dim(k: int, color: bool) -> int:
    d = descriptor_dim(color)
    return d + k * (d + 4)


def raw_dim() -> int:
    n = (CANVAS // CELL) - CELLS_PER_DESC + 1
    return n * n * CELLS_PER_DESC * CELLS_PER_DESC * ORIENT_BINS


def _to_canvas(patch: np.ndarray) -> np.ndarray:
    gray = to_gray(patch).astype(np.float32)
    h, w = gray.shape
    if (h, w) == (CANVAS, CANVAS):
        return gray
    interp = cv2.INTER_AREA if (h >= CANVAS and w >= CANVAS) else cv2.INTER_LINEAR
    return cv2.resize(gray, (CANVAS, CANVAS), interpolation=interp)


def _grad_descriptors(canvases: np.ndarray) -> np.ndarray:
    """Dense SIFT-style descriptors for a stack of ``(n, 48, 48)`` canvases -> ``(n, raw_dim)``."""
    c = canvases.astype(np.float32)
    n = c.shape[0]
    gy, gx = np.gradient(c, axis=(1, 2))
    mag = np.hypot(gx, gy)
    pos = np.mod(np.arctan2(gy, gx), 2 * np.pi) * (ORIENT_BINS / (2 * np.pi))
    lo_f = np.floor(pos)
    frac = pos - lo_f
    lo = lo_f.astype(np.int64) % ORIENT_BINS
    hi = (lo + 1) % ORIENT_BINS
    nc = CANVAS // CELL
    cell_idx = (np.arange(CANVAS) // CELL)
    cell_of_px = (cell_idx[:, None] * nc + cell_idx[None, :]).ravel()
    base = (np.arange(n)[:, None] * ORIENT_BINS) * (nc * nc)
    lo_idx = base + lo.reshape(n, -1) * (nc * nc) + cell_of_px[None, :]
    hi_idx = base + hi.reshape(n, -1) * (nc * nc) + cell_of_px[None, :]
    m = mag.reshape(n, -1)
    f = frac.reshape(n, -1)
    size = n * ORIENT_BINS * nc * nc
    cells = (np.bincount(lo_idx.ravel(), weights=(m * (1 - f)).ravel(), minlength=size)
             + np.bincount(hi_idx.ravel(), weights=(m * f).ravel(), minlength=size))
    cells = cells.reshape(n, ORIENT_BINS, nc, nc)
    blocks = sliding_window_view(cells, (CELLS_PER_DESC, CELLS_PER_DESC), axis=(2, 3))
    # (n, bins, py, px, cy, cx) -> (n, py, px, cy, cx, bins)
    desc = blocks.transpose(0, 2, 3, 4, 5, 1).reshape(n, -1, CELLS_PER_DESC ** 2 * ORIENT_BINS)
    norm = np.linalg.norm(desc, axis=2, keepdims=True)
    desc = np.divide(desc, norm, out=np.zeros_like(desc), where=norm > 1e-9)
    desc = np.minimum(desc, SIFT_CLIP)
    norm = np.linalg.norm(desc, axis=2, keepdims=True)
    desc = np.divide(desc, norm, out=np.zeros_like(desc), where=norm > 1e-9)
    return desc.reshape(n, -1)


def dense_grad_descriptors(patch: np.ndarray) -> np.ndarray:
    """Concatenated dense gradient descriptors of ``patch`` resampled to 48x48."""
    if patch.size == 0:
        raise ValueError("empty patch")
    return _grad_descriptors(_to_canvas(patch)[None])[0]


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray   # (raw_dim,)
    basis: np.ndarray  # (raw_dim, 128); zero columns beyond the data rank

    @cached_property
    def _basis32(self) -> np.ndarray:
        return np.ascontiguousarray(self.basis, dtype=np.float32)

    @cached_property
    def _mean32(self) -> np.ndarray:
        return self.mean.astype(np.float32)

    def project_fast(self, raw: np.ndarray) -> np.ndarray:
        """Single-precision projection for the inner optimization loops."""
        return ((raw.astype(np.float32) - self._mean32) @ self._basis32).astype(np.float64)

    @property
    def rank(self) -> int:
        return int(np.count_nonzero(np.linalg.norm(self.basis, axis=0) > 0))


def fit_pca(raw: np.ndarray, dim: int = PCA_DIM, rel_tol: float = 1e-6) -> PcaModel:
    """Principal subspace of ``raw`` (rows are samples), padded with zeros to ``dim`` columns."""
    raw = np.asarray(raw, dtype=np.float64)
    n, r = raw.shape
    mean = raw.mean(axis=0)
    xc = raw - mean
    if n < r:
        gram = xc @ xc.T
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1]
        evals, evecs = np.clip(evals[order], 0, None), evecs[:, order]
        sv = np.sqrt(evals)
        keep = sv > rel_tol * max(sv[0], 1e-300) if sv.size else np.zeros(0, bool)
        keep &= np.arange(sv.size) < dim
        comps = (xc.T @ evecs[:, keep]) / sv[keep]
    else:
        _, sv, vt = np.linalg.svd(xc, full_matrices=False)
        keep = sv > rel_tol * max(sv[0], 1e-300) if sv.size else np.zeros(0, bool)
        keep &= np.arange(sv.size) < dim
        comps = vt[keep].T
    if comps.shape[1]:
        # re-orthonormalize to guard against round-off in the gram route
        q, rr = np.linalg.qr(comps)
        comps = q * np.sign(np.diag(rr))
    basis = np.zeros((r, dim))
    basis[:, :comps.shape[1]] = comps
    return PcaModel(mean, basis)


def apply_pca(pca: PcaModel, raw: np.ndarray) -> np.ndarray:
    return (np.asarray(raw) - pca.mean) @ pca.basis


_EPAN_CACHE: dict[tuple[int, int], np.ndarray] = {}


def epanechnikov_weights(h: int, w: int) -> np.ndarray:
    """Epanechnikov profile over pixel centres, 1 at the centre and 0 at the corners."""
    key = (h, w)
    if key not in _EPAN_CACHE:
        ys = (np.arange(h) + 0.5) / h - 0.5
        xs = (np.arange(w) + 0.5) / w - 0.5
        r2 = (ys[:, None] ** 2 + xs[None, :] ** 2) / 0.5
        _EPAN_CACHE[key] = np.clip(1.0 - r2, 0.0, None)
    return _EPAN_CACHE[key]


def _hist_bins(patch: np.ndarray) -> np.ndarray:
    if patch.ndim == 2:
        return np.minimum((patch * GRAY_BINS).astype(int), GRAY_BINS - 1)
    hsv = cv2.cvtColor(patch.astype(np.float32), cv2.COLOR_RGB2HSV)
    nh, ns, nv = HSV_BINS
    hb = np.minimum((hsv[..., 0] / (360.0 / nh)).astype(int), nh - 1)
    sb = np.minimum((hsv[..., 1] * ns).astype(int), ns - 1)
    vb = np.minimum((hsv[..., 2] * nv).astype(int), nv - 1)
    return (hb * ns + sb) * nv + vb


def weighted_hist(patch: np.ndarray) -> np.ndarray:
    """Kernel-weighted color (or intensity) histogram summing to one."""
    if patch.size == 0:
        raise ValueError("empty patch")
    color = patch.ndim == 3
    weights = epanechnikov_weights(*patch.shape[:2])
    hist = np.bincount(_hist_bins(patch).ravel(), weights=weights.ravel(),
                       minlength=hist_dim(color)).astype(np.float64)
    total = hist.sum()
    return hist / total


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 1e-12)


def phi_batch(image: np.ndarray, rects, pca: PcaModel) -> np.ndarray:
    """Descriptors of several regions of one image, one row per rect."""
    rects = list(rects)
    crops = [crop_region(image, r) for r in rects]
    canvases = np.stack([_to_canvas(c) for c in crops])
    grad = _unit(pca.project_fast(_grad_descriptors(canvases)))
    hist = _unit(np.stack([weighted_hist(c) for c in crops]))
    return _unit(np.concatenate([grad, hist], axis=1))


def phi(image: np.ndarray, rect: Rect, pca: PcaModel) -> np.ndarray:
    """Unit-norm appearance descriptor of the region ``rect`` of ``image``."""
    return phi_batch(image, [rect], pca)[0]


def pixel_cache_key(shape, rect: Rect) -> tuple[int, int, int, int]:
    """Key identifying the pixels a rect covers; equal keys give equal descriptors."""
    rect.validate()
    return pixel_box(shape, rect)


def raw_descriptors(image: np.ndarray, rects) -> np.ndarray:
    """Raw (pre-PCA) gradient descriptors, used to fit the PCA model."""
    canvases = np.stack([_to_canvas(crop_region(image, r)) for r in rects])
    return _grad_descriptors(canvases)


def descriptor_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Normalized-correlation distance ``1 - p.q`` of the unit-normalized vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    np_, nq = np.linalg.norm(p), np.linalg.norm(q)
    if np_ == 0 or nq == 0:
        raise ValueError("descriptor_distance of a zero vector")
    return float(min(max(1.0 - (p @ q) / (np_ * nq), 0.0), 2.0))


def distances_to(p: np.ndarray, qs: np.ndarray) -> np.ndarray:
    """``descriptor_distance(p, q)`` for every row of ``qs`` (rows assumed unit-norm or zero)."""
    pn = p / np.linalg.norm(p)
    return np.clip(1.0 - qs @ pn, 0.0, 2.0)


def assemble_feature(image: np.ndarray, parts, pca: PcaModel, k: int | None = None) -> np.ndarray:
    """Global descriptor followed by (descriptor, center, size) for each part, by part index.

    ``parts`` is a mapping ``index -> (Rect, descriptor)`` or a sequence of
    ``(index, Rect, descriptor)`` triples; all indices ``0..k-1`` must be present.
    """
    items = dict(parts.items()) if isinstance(parts, dict) else {i: (r, d) for i, r, d in parts}
    k = len(items) if k is None else k
    missing = [i for i in range(k) if i not in items]
    if missing or len(items) != k:
        raise ValueError(f"parts missing for indices {missing}" if missing
                         else f"expected {k} parts, got {len(items)}")
    chunks = [phi(image, FULL_RECT, pca)]
    for i in range(k):
        rect, desc = items[i]
        chunks.append(np.asarray(desc, dtype=np.float64))
        chunks.append(np.array([rect.cx, rect.cy, rect.w, rect.h]))
    return np.concatenate(chunks)

