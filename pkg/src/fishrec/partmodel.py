"""Non-rigid part model: objective, part localization, size fitting and appearance learning.

A model holds K unit-norm part appearances ``P`` and, for every training
image, K rectangles.  Training alternates between moving the rectangles
(mean-shift on location, scale-space search on size) with ``P`` fixed, and
re-estimating ``P`` with the rectangles fixed.  Every rectangle update is
guarded so that the total objective never increases.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from . import association as assoc
from .descriptor import (PcaModel, fit_pca, phi_batch, pixel_cache_key,
                         raw_descriptors)
from .imaging import Rect, clamp_rect, fit_size_to_center, overlap_rate
from .saliency import (InitFailure, SaliencyConfig, init_parts, pft_saliency,
                       top_saliency_sum)

log = logging.getLogger(__name__)

# relative slack on "does not increase" comparisons, absorbs float round-off
COST_TOL = 1e-12


@dataclass(frozen=True)
class LearnConfig:
    k: int = 6
    max_iter: int = 15
    part_conv_tol: float = 0.5
    ms_eps: float = 0.5
    scale_base: float = 2.0 ** (1.0 / 3.0)
    scale_range: tuple[int, ...] = (-2, -1, 0, 1, 2)
    lam_fit: float = 1.0
    lam_sep: float = 1.0
    lam_disc: float = 1.0
    ms_max_iter: int = 10
    size_max_iter: int = 5
    scale_sigma: float = 1.0
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_iter < 1 or self.ms_max_iter < 1 or self.size_max_iter < 1:
            raise ValueError("iteration caps must be >= 1")
        for name in ("part_conv_tol", "ms_eps", "scale_sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not self.scale_base > 1:
            raise ValueError("scale_base must be > 1")
        if min(self.lam_fit, self.lam_sep, self.lam_disc) < 0:
            raise ValueError("term weights must be >= 0")
        om = sorted(self.scale_range)
        if 0 not in om or om != sorted(-w for w in om) or len(set(om)) != len(om):
            raise ValueError("scale_range must be symmetric integers containing 0")


@dataclass(frozen=True)
class ObjectiveBreakdown:
    fitness: float
    separation: float
    discrimination: float
    total: float

    def as_dict(self) -> dict:
        return {"fitness": self.fitness, "separation": self.separation,
                "discrimination": self.discrimination, "total": self.total}


class RegionCache:
    """Memoized region descriptors of one image.

    Descriptors only depend on the integer pixel box a rect covers, so the
    many near-identical probes made during optimization are cheap.
    """

    def __init__(self, image: np.ndarray, pca: PcaModel):
        self.image = image
        self.pca = pca
        self._store: dict[tuple[int, int, int, int], np.ndarray] = {}

    def __call__(self, rects) -> np.ndarray:
        rects = list(rects)
        keys = [pixel_cache_key(self.image.shape, r) for r in rects]
        todo = {}
        for key, r in zip(keys, rects):
            if key not in self._store and key not in todo:
                todo[key] = r
        if todo:
            fresh = phi_batch(self.image, list(todo.values()), self.pca)
            for key, row in zip(todo, fresh):
                self._store[key] = row
        return np.stack([self._store[key] for key in keys])


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------

def pairwise_distance(P: np.ndarray) -> np.ndarray:
    return 1.0 - P @ P.T


def separation_of(rects) -> float:
    """Sum of overlap rates over ordered pairs of distinct parts."""
    total = 0.0
    for i in range(len(rects)):
        for j in range(i + 1, len(rects)):
            total += 2.0 * overlap_rate(rects[i], rects[j])
    return total


def objective(P: np.ndarray, rects_per_image, caches, cfg: LearnConfig) -> ObjectiveBreakdown:
    """Fitness, separation and discrimination terms of a part configuration."""
    P = np.asarray(P, dtype=float)
    fit = 0.0
    sep = 0.0
    for rects, cache in zip(rects_per_image, caches):
        desc = cache(rects)
        fit += float(np.sum(1.0 - np.sum(desc * P, axis=1)))
        sep += separation_of(rects)
    disc = -float(np.sum(pairwise_distance(P)))
    total = cfg.lam_fit * fit + cfg.lam_sep * sep + cfg.lam_disc * disc
    return ObjectiveBreakdown(fit, sep, disc, total)


def local_costs(cands, i: int, rects, p_i: np.ndarray, cache, cfg: LearnConfig) -> np.ndarray:
    """Part of the objective that depends on rect ``i`` of one image, per candidate rect."""
    cands = list(cands)
    if not cands:
        return np.zeros(0)
    desc = cache(cands)
    fit = 1.0 - desc @ p_i
    others = [r for j, r in enumerate(rects) if j != i]
    sep = np.array([sum(overlap_rate(c, o) for o in others) for c in cands])
    return cfg.lam_fit * fit + 2.0 * cfg.lam_sep * sep


# --------------------------------------------------------------------------
# location and size updates
# --------------------------------------------------------------------------

_STENCIL = [(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dx, dy) != (0, 0)]


def _shift_px(rect: Rect, dx: float, dy: float, shape) -> Rect:
    h, w = shape[:2]
    return clamp_rect(rect.with_center(rect.cx + dx / w, rect.cy + dy / h))


def _meanshift_target(rect: Rect, grad: np.ndarray, shape) -> np.ndarray | None:
    """Kernel-weighted mean of pixel positions, weighted by descent along ``-grad``."""
    h, w = shape[:2]
    cx, cy = rect.cx * w, rect.cy * h
    hw, hh = max(rect.w * w / 2, 1.0), max(rect.h * h / 2, 1.0)
    xs = np.arange(max(int(cx - hw), 0), min(int(np.ceil(cx + hw)), w)) + 0.5
    ys = np.arange(max(int(cy - hh), 0), min(int(np.ceil(cy + hh)), h)) + 0.5
    if xs.size == 0 or ys.size == 0:
        return None
    dx = xs[None, :] - cx
    dy = ys[:, None] - cy
    kern = np.clip(1.0 - (dx / hw) ** 2 - (dy / hh) ** 2, 0.0, None)
    wt = kern * np.clip(-(grad[0] * dx + grad[1] * dy), 0.0, None)
    s = wt.sum()
    if s <= 0:
        return None
    return np.array([(wt * dx).sum() / s, (wt * dy).sum() / s])


def localize_part(i: int, rects, p_i: np.ndarray, cache, cfg: LearnConfig) -> Rect:
    """Mean-shift search for the center of part ``i``; the size is left alone.

    Per-pixel weights come from central differences of the local cost under
    one-pixel shifts.  Each step also probes the eight one-pixel neighbours,
    and a move is taken only when it lowers the local cost.
    """
    shape = cache.image.shape
    rects = list(rects)
    cur = rects[i]
    cur_cost = float(local_costs([cur], i, rects, p_i, cache, cfg)[0])
    for _ in range(cfg.ms_max_iter):
        stencil = [_shift_px(cur, dx, dy, shape) for dx, dy in _STENCIL]
        sc = local_costs(stencil, i, rects, p_i, cache, cfg)
        by_off = dict(zip(_STENCIL, sc))
        grad = np.array([(by_off[(1, 0)] - by_off[(-1, 0)]) / 2,
                         (by_off[(0, 1)] - by_off[(0, -1)]) / 2])
        cands, shifts = list(stencil), [np.hypot(dx, dy) for dx, dy in _STENCIL]
        step = _meanshift_target(cur, grad, shape)
        if step is not None:
            while np.hypot(*step) >= cfg.ms_eps:
                prop = _shift_px(cur, step[0], step[1], shape)
                cands.append(prop)
                shifts.append(float(np.hypot(*step)))
                step = step / 2
        costs = np.concatenate([sc, local_costs(cands[len(stencil):], i, rects, p_i, cache, cfg)])
        best = int(np.argmin(costs))
        if not costs[best] < cur_cost - COST_TOL * max(1.0, abs(cur_cost)):
            break
        cur, cur_cost = cands[best], float(costs[best])
        if shifts[best] < cfg.ms_eps:
            break
    return cur


def _scaled(rect: Rect, factor: float) -> Rect:
    return fit_size_to_center(clamp_rect(rect.with_size(rect.w * factor, rect.h * factor))
                              .with_center(rect.cx, rect.cy))


def fit_part_size(i: int, rects, p_i: np.ndarray, cache, cfg: LearnConfig) -> Rect:
    """Scale-space search on the size of part ``i`` with its center fixed.

    The step ``r'`` is the mean of the scale offsets weighted by their cost
    improvement and a Gaussian kernel over the offset; the size becomes
    ``s * b**r'``.  Scaling is isotropic and shrinks to stay inside the image.
    """
    rects = list(rects)
    cur = rects[i]
    cur_cost = float(local_costs([cur], i, rects, p_i, cache, cfg)[0])
    omega = np.array(sorted(cfg.scale_range), dtype=float)
    kern = np.exp(-0.5 * (omega / cfg.scale_sigma) ** 2)
    for _ in range(cfg.size_max_iter):
        cands = [_scaled(cur, cfg.scale_base ** o) for o in omega]
        costs = local_costs(cands, i, rects, p_i, cache, cfg)
        gain = np.clip(cur_cost - costs, 0.0, None) * kern
        if gain.sum() <= 0:
            break
        r = float(gain @ omega / gain.sum())
        if abs(r) < 0.1:
            break
        prop = _scaled(cur, cfg.scale_base ** r)
        pc = float(local_costs([prop], i, rects, p_i, cache, cfg)[0])
        best = int(np.argmin(costs))
        nxt, nc = (prop, pc) if pc <= costs[best] else (cands[best], float(costs[best]))
        if not nc < cur_cost - COST_TOL * max(1.0, abs(cur_cost)):
            break
        cur, cur_cost = nxt, nc
    return cur


# --------------------------------------------------------------------------
# appearance update
# --------------------------------------------------------------------------

def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def min_norm_hull_point(points: np.ndarray) -> np.ndarray:
    """Point of minimum norm in the convex hull of the rows of ``points``."""
    points = np.asarray(points, dtype=float)
    m = len(points)
    if m == 1:
        return points[0].copy()
    # minimize ||A^T lam|| s.t. sum(lam) = 1, lam >= 0; the simplex row is
    # weighted heavily so nnls honours it
    scale = 1e3 * max(1.0, float(np.abs(points).max()))
    a = np.vstack([points.T, scale * np.ones((1, m))])
    b = np.zeros(a.shape[0])
    b[-1] = scale
    lam, _ = nnls(a, b)
    lam /= lam.sum()
    return lam @ points


def appearance_update(regions: np.ndarray, others: np.ndarray, cfg: LearnConfig) -> np.ndarray:
    """Max-min appearance of one part from its region descriptors and the other parts.

    Solves ``max_{|p| <= 1} min_m p . a_m`` with
    ``a_m = lam_fit * N * i_m - 2 * lam_disc * sum_j p_j``: the worst-fitting
    region is pushed towards ``p`` while ``p`` is pushed away from the other
    parts.  The answer is the direction of the minimum-norm point of the
    convex hull of the ``a_m``.  When that hull contains the origin the
    program is degenerate and the normalized mean of the regions is used.
    """
    regions = np.atleast_2d(np.asarray(regions, dtype=float))
    n = len(regions)
    push = 2.0 * cfg.lam_disc * np.sum(others, axis=0) if len(others) else 0.0
    a = cfg.lam_fit * n * regions - push
    z = min_norm_hull_point(a)
    if np.linalg.norm(z) <= 1e-9 * max(1.0, float(np.abs(a).max())):
        return _unit(regions.mean(axis=0))
    return _unit(z)


def part_cost(p: np.ndarray, i: int, P: np.ndarray, regions: np.ndarray, cfg: LearnConfig) -> float:
    """Objective terms that involve the appearance of part ``i``."""
    fit = float(np.sum(1.0 - regions @ p))
    others = np.delete(P, i, axis=0)
    disc = -2.0 * float(np.sum(1.0 - others @ p))
    return cfg.lam_fit * fit + cfg.lam_disc * disc


# --------------------------------------------------------------------------
# learning
# --------------------------------------------------------------------------

@dataclass
class PartModel:
    k: int
    P: np.ndarray                    # (K, D) unit rows
    rects: list[list[Rect]]          # training layouts, one list of K rects per image
    names: list[str]
    pca: PcaModel
    config: LearnConfig
    reference: np.ndarray            # (K, 2) projected reference layout
    color: bool
    history: list[ObjectiveBreakdown] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def mean_layout(self) -> list[Rect]:
        arr = np.array([[r.as_array() for r in rs] for rs in self.rects])
        mean = arr.mean(axis=0)
        return [clamp_rect(Rect(*row)) for row in mean]


def order_by_reference(rects, mask, reference: np.ndarray) -> tuple[list[Rect], list[bool]]:
    """Reorder candidate rects to match the reference slots.

    Returns the reordered rects and, per slot, whether it was matched.  Slots
    left unmatched are filled by the leftover candidates, nearest first in the
    projected frame.
    """
    centers = [(r.cx, r.cy) for r in rects]
    pset = assoc.PartSet.from_mask(centers, mask)
    u = assoc.principal_axes_project(pset)
    res = assoc.relax_label_projected(u, reference)
    k = len(rects)
    slots: list[int | None] = [None] * k
    for cand, ref in enumerate(res.assignment):
        if ref != assoc.OUTLIER:
            slots[ref] = cand
    matched = [s is not None for s in slots]
    left = [c for c in range(k) if c not in slots]
    for j in range(k):
        if slots[j] is None:
            c = min(left, key=lambda c: (float(np.sum((u[c] - reference[j]) ** 2)), c))
            slots[j] = c
            left.remove(c)
    return [rects[s] for s in slots], matched


def _init_layouts(images, masks, cfg: LearnConfig):
    kept, layouts, scores = [], [], []
    for idx, (img, msk) in enumerate(zip(images, masks)):
        sal = pft_saliency(img, cfg.saliency)
        try:
            layouts.append(init_parts(sal, msk, cfg.k, cfg.saliency))
        except InitFailure as err:
            log.warning("image %d dropped: %s", idx, err)
            continue
        kept.append(idx)
        scores.append(top_saliency_sum(sal, msk, cfg.k, cfg.saliency))
    return kept, layouts, scores


def train_part_model(images, masks, cfg: LearnConfig = LearnConfig(), names=None,
                     callback=None) -> PartModel:
    """Learn part appearances and per-image part rectangles without supervision.

    ``callback(iteration, breakdown)`` is invoked after every full iteration.
    Images that cannot seed ``cfg.k`` parts are dropped with a warning.
    """
    images = list(images)
    masks = [np.asarray(m, dtype=bool) for m in masks]
    names = list(names) if names is not None else [str(i) for i in range(len(images))]
    kept, layouts, scores = _init_layouts(images, masks, cfg)
    if len(kept) < 2:
        raise ValueError(f"need at least 2 usable training images, got {len(kept)}")
    images = [images[i] for i in kept]
    masks = [masks[i] for i in kept]
    names = [names[i] for i in kept]
    color = images[0].ndim == 3

    ref_idx = int(np.argmax(scores))
    ref_set = assoc.PartSet.from_mask([(r.cx, r.cy) for r in layouts[ref_idx]], masks[ref_idx])
    reference = assoc.principal_axes_project(ref_set)
    rects = []
    for m, lay in enumerate(layouts):
        rects.append(list(lay) if m == ref_idx else order_by_reference(lay, masks[m], reference)[0])

    raw = np.concatenate([raw_descriptors(img, rs) for img, rs in zip(images, rects)])
    pca = fit_pca(raw)
    del raw
    caches = [RegionCache(img, pca) for img in images]
    regions = np.stack([c(rs) for c, rs in zip(caches, rects)])     # (N, K, D)
    P = np.stack([_unit(regions[:, i].mean(axis=0)) for i in range(cfg.k)])

    history = [objective(P, rects, caches, cfg)]
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        # step 1: locations
        for m, cache in enumerate(caches):
            for i in range(cfg.k):
                rects[m][i] = localize_part(i, rects[m], P[i], cache, cfg)
        # step 2: sizes
        for m, cache in enumerate(caches):
            for i in range(cfg.k):
                rects[m][i] = fit_part_size(i, rects[m], P[i], cache, cfg)
        # step 3: appearances
        regions = np.stack([c(rs) for c, rs in zip(caches, rects)])
        delta = 0.0
        for i in range(cfg.k):
            cand = appearance_update(regions[:, i], np.delete(P, i, axis=0), cfg)
            old = part_cost(P[i], i, P, regions[:, i], cfg)
            new = part_cost(cand, i, P, regions[:, i], cfg)
            if new < old - COST_TOL * max(1.0, abs(old)):
                delta += float(np.linalg.norm(cand - P[i]))
                P[i] = cand
        br = objective(P, rects, caches, cfg)
        history.append(br)
        if callback is not None:
            callback(it, br)
        log.info("iteration %d: J=%.6f (fit %.4f sep %.4f disc %.4f) dP=%.4f",
                 it, br.total, br.fitness, br.separation, br.discrimination, delta)
        if delta <= cfg.part_conv_tol:
            converged = True
            break
    return PartModel(cfg.k, P, rects, names, pca, cfg, reference, color, history, it, converged)


def refine_layout(rects, P: np.ndarray, cache, cfg: LearnConfig, max_rounds: int | None = None):
    """Alternate location and size updates with ``P`` frozen until nothing moves."""
    rects = list(rects)
    for _ in range(max_rounds or cfg.max_iter):
        before = list(rects)
        for i in range(len(rects)):
            rects[i] = localize_part(i, rects, P[i], cache, cfg)
        for i in range(len(rects)):
            rects[i] = fit_part_size(i, rects, P[i], cache, cfg)
        if rects == before:
            break
    return rects


def detect_parts(image: np.ndarray, mask: np.ndarray, model: PartModel,
                 cache: RegionCache | None = None) -> tuple[list[Rect], list[bool]]:
    """Part rects for an unseen image plus a per-part flag telling whether it was matched.

    Parts that cannot be associated start from the average training layout;
    if the image yields too few salient points the whole average layout is used.
    """
    cfg = model.config
    mask = np.asarray(mask, dtype=bool)
    cache = cache or RegionCache(image, model.pca)
    fallback = model.mean_layout
    sal = pft_saliency(image, cfg.saliency)
    try:
        cand = init_parts(sal, mask, cfg.k, cfg.saliency)
    except InitFailure:
        rects, matched = list(fallback), [False] * cfg.k
    else:
        rects, matched = order_by_reference(cand, mask, model.reference)
        rects = [r if ok else fallback[j] for j, (r, ok) in enumerate(zip(rects, matched))]
    rects = refine_layout(rects, model.P, cache, cfg)
    return rects, matched

