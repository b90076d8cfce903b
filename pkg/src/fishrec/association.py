"""One-to-one part association by relaxation labeling with an outlier slot.

Point sets are expressed in the principal-axis frame of the object mask
(origin at the mask centroid, first axis along the elongation, scaled so the
mask spans one unit along that axis).  Compatibility between two tentative
matches compares the lengths of the inter-part vectors and the cosines of
their angles to the first axis only, which makes left/right flips harmless.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEIGHBORS = 3
RELAX_MAX_ITER = 200
RELAX_TOL = 0.05
SINKHORN_MAX_ITER = 100
SINKHORN_TOL = 1e-6
OUTLIER = -1


class SinkhornError(RuntimeError):
    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


@dataclass(frozen=True)
class Frame:
    origin: np.ndarray  # (2,)
    axes: np.ndarray    # (2, 2), rows are the unit axes
    extent: float       # mask length along the first axis


@dataclass(frozen=True)
class PartSet:
    """K part locations plus the foreground support they were found on.

    ``points`` and ``support`` share one Euclidean frame (pixel units when
    built with :meth:`from_mask`).
    """

    points: np.ndarray
    support: np.ndarray

    @classmethod
    def from_mask(cls, centers, mask: np.ndarray) -> "PartSet":
        """Build from normalized ``(cx, cy)`` centers and the object mask."""
        h, w = mask.shape
        centers = np.asarray(centers, dtype=float).reshape(-1, 2)
        pts = centers * np.array([w, h])
        rows, cols = np.nonzero(mask)
        support = np.column_stack([cols + 0.5, rows + 0.5]).astype(float)
        return cls(pts, support)

    def __len__(self):
        return len(self.points)


def principal_frame(support: np.ndarray, use_axes: bool = True) -> Frame:
    support = np.asarray(support, dtype=float)
    origin = support.mean(axis=0) if len(support) else np.zeros(2)
    centered = support - origin
    if not use_axes or len(support) < 2:
        axes = np.eye(2)
    else:
        cov = centered.T @ centered / len(support)
        evals, evecs = np.linalg.eigh(cov)
        a1 = evecs[:, np.argmax(evals)]
        proj = centered @ a1
        skew = np.mean(proj ** 3)
        scale = max(np.mean(proj ** 2) ** 1.5, 1e-300)
        if abs(skew) / scale > 1e-9:
            if skew < 0:
                a1 = -a1
        elif a1[0] < -1e-12 or (abs(a1[0]) <= 1e-12 and a1[1] < 0):
            a1 = -a1
        axes = np.array([a1, [-a1[1], a1[0]]])
    proj1 = centered @ axes[0] if len(support) else np.zeros(1)
    extent = float(proj1.max() - proj1.min()) if len(support) else 0.0
    return Frame(origin, axes, extent if extent > 0 else 1.0)


def principal_axes_project(parts: PartSet) -> np.ndarray:
    """Part coordinates in the mask's principal frame, scaled to unit first-axis extent.

    A single part gets the identity basis.
    """
    frame = principal_frame(parts.support, use_axes=len(parts) >= 2)
    return (parts.points - frame.origin) @ frame.axes.T / frame.extent


def mutual_knn(coords: np.ndarray, k: int = NEIGHBORS) -> list[set[int]]:
    """Mutual k-nearest-neighbour sets (ties broken by index)."""
    n = len(coords)
    if n <= 1:
        return [set() for _ in range(n)]
    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    kk = min(k, n - 1)
    knn = [set(np.argsort(d[i], kind="stable")[:kk].tolist()) for i in range(n)]
    return [{j for j in knn[i] if i in knn[j]} for i in range(n)]


def _pair_geometry(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diff = coords[None, :, :] - coords[:, None, :]   # diff[i, k] = c_k - c_i
    dist = np.sqrt((diff ** 2).sum(-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(dist > 0, diff[..., 0] / np.where(dist > 0, dist, 1), np.nan)
    return dist, cos


def compatibility_tensor(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``r[i, j, k, l]`` for all index quadruples (candidates u, references v)."""
    du, cu = _pair_geometry(u)
    dv, cv = _pair_geometry(v)
    a = (du[:, None, :, None] - dv[None, :, None, :]) ** 2
    b = (cu[:, None, :, None] - cv[None, :, None, :]) ** 2
    b = np.nan_to_num(b, nan=0.0)
    return np.exp(-(a + b))


def compatibility(i: int, j: int, k: int, l: int, u: np.ndarray, v: np.ndarray) -> float:
    """Compatibility of matches (u_i, v_j) and (u_k, v_l), in (0, 1]."""
    du = np.asarray(u[k], float) - np.asarray(u[i], float)
    dv = np.asarray(v[l], float) - np.asarray(v[j], float)
    nu, nv = float(np.hypot(*du)), float(np.hypot(*dv))
    a = (nu - nv) ** 2
    b = 0.0 if nu == 0 or nv == 0 else (du[0] / nu - dv[0] / nv) ** 2
    return float(np.exp(-(a + b)))


def sinkhorn_normalize(m: np.ndarray, tol: float = SINKHORN_TOL,
                       max_iter: int = SINKHORN_MAX_ITER) -> np.ndarray:
    """Alternate row and column normalization until both sum to one within ``tol``."""
    m = np.array(m, dtype=float)
    if np.any(m < 0):
        raise ValueError("association matrix must be non-negative")
    for _ in range(max_iter):
        rs = m.sum(axis=1)
        if rs.min() <= 0:
            raise SinkhornError("all-zero row")
        m /= rs[:, None]
        cs = m.sum(axis=0)
        if cs.min() <= 0:
            raise SinkhornError("all-zero column")
        m /= cs
        # columns now sum to one up to round-off, so only rows need checking
        if np.abs(m.sum(axis=1) - 1).max() < tol:
            return m
    raise SinkhornError(f"no convergence within {max_iter} alternations", m)


def _greedy_readout(pi: np.ndarray) -> list[int]:
    """Argmax read-out made one-to-one: visit entries by descending value."""
    k = pi.shape[0] - 1
    out = [None] * k
    used: set[int] = set()
    flat = np.argsort(-pi[:k].ravel(), kind="stable")
    ncol = pi.shape[1]
    for idx in flat:
        i, j = divmod(int(idx), ncol)
        if out[i] is not None:
            continue
        if j == ncol - 1:
            out[i] = OUTLIER
        elif j not in used:
            out[i] = j
            used.add(j)
    return [OUTLIER if o is None else o for o in out]


@dataclass
class RelaxResult:
    assignment: list[int]   # reference index per candidate, OUTLIER for no match
    pi: np.ndarray
    iterations: int
    converged: bool


def relax_label_projected(u: np.ndarray, v: np.ndarray, max_iter: int = RELAX_MAX_ITER,
                          tol: float = RELAX_TOL, k: int = NEIGHBORS) -> RelaxResult:
    """Relaxation labeling between already-projected candidate ``u`` and reference ``v``."""
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    if len(u) == 0 or len(v) == 0:
        raise ValueError("empty part set")
    if len(u) != len(v):
        raise ValueError("candidate and reference sets must have equal size")
    n = len(u)
    if n == 1:
        pi = np.eye(2)
        return RelaxResult([0], pi, 0, True)
    nu, nv = mutual_knn(u, k), mutual_knn(v, k)
    r = compatibility_tensor(u, v)
    # neighbourhood indicator matrices: A[i, k] = 1 if k in N_i
    a = np.zeros((n, n))
    b = np.zeros((n, n))
    for i in range(n):
        a[i, list(nu[i])] = 1.0
        b[i, list(nv[i])] = 1.0
    # mean rather than summed support keeps parts with few neighbours on the
    # same scale as the constant outlier support
    scale = np.outer(np.maximum(a.sum(1), 1), np.maximum(b.sum(1), 1))
    rw = r * a[:, None, :, None] * b[None, :, None, :] / scale[:, :, None, None]
    pi = np.full((n + 1, n + 1), 1.0 / (n + 1))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        q = np.einsum("ijkl,kl->ij", rw, pi[:n, :n])
        qfull = np.empty_like(pi)
        qfull[:n, :n] = q
        med = float(np.median(q))
        qfull[n, :] = med
        qfull[:, n] = med
        upd = pi * qfull
        rs = upd.sum(axis=1, keepdims=True)
        rs[rs <= 0] = 1.0
        upd /= rs
        try:
            pi = sinkhorn_normalize(upd)
        except SinkhornError as err:
            if err.partial is None:
                break
            pi = err.partial
        if np.abs(pi - np.round(pi)).max() < tol:
            converged = True
            break
    return RelaxResult(_greedy_readout(pi), pi, it, converged)


def relax_label(candidates: PartSet, reference: PartSet, **kw) -> list[int]:
    """Assign each candidate part a reference index (or ``OUTLIER``)."""
    u = principal_axes_project(candidates)
    v = principal_axes_project(reference)
    return relax_label_projected(u, v, **kw).assignment
