"""Unsupervised class hierarchy with biased-penalty SVM nodes and partial classification.

The tree is grown top-down: a two-component Gaussian mixture splits the
samples, every species follows the cluster holding most of its samples, and
an RBF SVM with class-frequency-balanced penalties learns the split.  Each
node also gets an indecision threshold ``t*``; at prediction time a sample
whose decision value has magnitude below ``t*`` stops at that node.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
TAU = 1e-12


# --------------------------------------------------------------------------
# two-component mixture of diagonal Gaussians
# --------------------------------------------------------------------------

@dataclass
class MoG2:
    weights: np.ndarray      # (2,)
    means: np.ndarray        # (2, d)
    variances: np.ndarray    # (2, d) diagonal covariances
    resp: np.ndarray         # (n, 2)
    loglik: list[float]      # per EM iteration, best restart

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.resp, axis=1)


def _log_gauss(x, means, variances):
    # (n, 2) log densities of diagonal Gaussians
    out = np.empty((len(x), len(means)))
    for c in range(len(means)):
        diff = x - means[c]
        out[:, c] = -0.5 * (np.sum(diff * diff / variances[c], axis=1)
                            + np.sum(np.log(2 * np.pi * variances[c])))
    return out


def _kmeanspp_pair(x, rng):
    first = int(rng.integers(len(x)))
    d2 = np.sum((x - x[first]) ** 2, axis=1)
    if d2.sum() <= 0:
        second = int(rng.integers(len(x)))
    else:
        second = int(rng.choice(len(x), p=d2 / d2.sum()))
    return x[[first, second]].copy()


def _em_run(x, means, max_iter, tol):
    n, d = x.shape
    var0 = np.maximum(x.var(axis=0), VAR_FLOOR)
    weights = np.full(2, 0.5)
    variances = np.tile(var0, (2, 1))
    history = []
    resp = np.full((n, 2), 0.5)
    for _ in range(max_iter):
        lj = _log_gauss(x, means, variances) + np.log(np.maximum(weights, 1e-300))
        norm = logsumexp(lj, axis=1, keepdims=True)
        ll = float(norm.sum())
        resp = np.exp(lj - norm)
        if history and ll - history[-1] <= tol * max(1.0, abs(ll)):
            history.append(ll)
            break
        history.append(ll)
        nk = resp.sum(axis=0)
        weights = nk / n
        for c in range(2):
            if nk[c] <= 1e-12:
                continue
            means[c] = resp[:, c] @ x / nk[c]
            diff = x - means[c]
            variances[c] = np.maximum(resp[:, c] @ (diff * diff) / nk[c], VAR_FLOOR)
    return MoG2(weights, means, variances, resp, history)


def em_mog2(x: np.ndarray, seed: int = 0, restarts: int = 5, max_iter: int = 200,
            tol: float = 1e-8) -> MoG2:
    """Fit a two-component diagonal Gaussian mixture by EM, keeping the best of several restarts."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("em_mog2 needs at least 2 samples in a 2-D array")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        fit = _em_run(x, _kmeanspp_pair(x, rng), max_iter, tol)
        if best is None or fit.loglik[-1] > best.loglik[-1]:
            best = fit
    return best


def relabel_by_majority(assign, species) -> tuple[np.ndarray, dict]:
    """Give every sample of a species the sign of that species' majority cluster.

    Cluster 1 maps to +1 and cluster 0 to -1; an even split goes to cluster 0.
    """
    assign = np.asarray(assign)
    species = np.asarray(species)
    side = {}
    for sp in dict.fromkeys(species.tolist()):
        sel = assign[species == sp]
        ones = int(np.sum(sel == 1))
        side[sp] = 1 if ones > len(sel) - ones else -1
    return np.array([side[s] for s in species.tolist()]), side


# --------------------------------------------------------------------------
# biased-penalty SVM by SMO
# --------------------------------------------------------------------------

def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    return np.exp(-gamma * np.maximum(aa + bb - 2 * a @ b.T, 0.0))


def default_gamma(x: np.ndarray) -> float:
    v = float(np.asarray(x).var())
    return 1.0 / (x.shape[1] * v) if v > 0 else 1.0


def biased_penalties(y, c: float) -> tuple[float, float]:
    """``(C+, C-)`` with each class's penalty proportional to the other class's size."""
    y = np.asarray(y)
    n = len(y)
    npos = int(np.sum(y > 0))
    nneg = n - npos
    return c * nneg / n, c * npos / n


@dataclass
class SvmNode:
    sv: np.ndarray           # (m, d) support vectors
    coef: np.ndarray         # (m,) alpha_i * y_i
    rho: float
    gamma: float
    c_pos: float
    c_neg: float
    threshold: float = 0.0
    train_margins: np.ndarray = field(default_factory=lambda: np.zeros(0))   # y_i f(x_i)
    iterations: int = 0
    gap: float = 0.0

    def decision(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if len(self.sv) == 0:
            return np.full(len(x), -self.rho)
        return rbf_kernel(x, self.sv, self.gamma) @ self.coef - self.rho


@dataclass
class SmoState:
    alpha: np.ndarray
    grad: np.ndarray
    rho: float
    iterations: int
    gap: float


def smo_solve(kmat: np.ndarray, y: np.ndarray, cvec: np.ndarray, eps: float = 1e-3,
              max_iter: int | None = None) -> SmoState:
    """Soft-margin SVM dual with per-sample upper bounds, second-order working-set selection."""
    n = len(y)
    y = y.astype(float)
    q = (y[:, None] * y[None, :]) * kmat
    diag = np.diag(q).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)
    max_iter = max_iter or max(10_000_000, 100 * n)
    it = 0
    gap = np.inf
    while it < max_iter:
        yg = -y * grad
        up = ((y > 0) & (alpha < cvec)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < cvec))
        if not up.any() or not low.any():
            gap = 0.0
            break
        i = int(np.argmax(np.where(up, yg, -np.inf)))
        gmax = yg[i]
        gmin = float(np.min(np.where(low, yg, np.inf)))
        gap = gmax - gmin
        if gap < eps:
            break
        b = gmax - yg
        a = diag[i] + diag - 2 * y[i] * y * q[i]
        a = np.where(a > 0, a, TAU)
        cand = low & (b > 0)
        if not cand.any():
            break
        j = int(np.argmin(np.where(cand, -(b * b) / a, np.inf)))
        ci, cj = cvec[i], cvec[j]
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = diag[i] + diag[j] + 2 * q[i, j]
            quad = quad if quad > 0 else TAU
            delta = (-grad[i] - grad[j]) / quad
            diff = ai - aj
            ai += delta
            aj += delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > ci - cj:
                if ai > ci:
                    ai, aj = ci, ci - diff
            elif aj > cj:
                aj, ai = cj, cj + diff
        else:
            quad = diag[i] + diag[j] - 2 * q[i, j]
            quad = quad if quad > 0 else TAU
            delta = (grad[i] - grad[j]) / quad
            total = ai + aj
            ai -= delta
            aj += delta
            if total > ci:
                if ai > ci:
                    ai, aj = ci, total - ci
            elif aj < 0:
                aj, ai = 0.0, total
            if total > cj:
                if aj > cj:
                    aj, ai = cj, total - cj
            elif ai < 0:
                ai, aj = 0.0, total
        di, dj = ai - alpha[i], aj - alpha[j]
        alpha[i], alpha[j] = ai, aj
        grad += q[:, i] * di + q[:, j] * dj
        it += 1
    return SmoState(alpha, grad, _rho(alpha, grad, y, cvec), it, float(gap))


def _rho(alpha, grad, y, cvec):
    yg = y * grad
    at_ub = alpha >= cvec
    at_lb = alpha <= 0
    free = ~at_ub & ~at_lb
    if free.any():
        return float(yg[free].mean())
    ub_set = (at_ub & (y < 0)) | (at_lb & (y > 0))
    lb_set = (at_ub & (y > 0)) | (at_lb & (y < 0))
    ub = yg[ub_set].min() if ub_set.any() else np.inf
    lb = yg[lb_set].max() if lb_set.any() else -np.inf
    return float((ub + lb) / 2)


def kkt_violation(alpha, margins, cvec) -> float:
    """Largest violation of the soft-margin optimality conditions on ``y_i f(x_i)``."""
    below = np.where(alpha < cvec, np.clip(1 - margins, 0, None), 0.0)
    above = np.where(alpha > 0, np.clip(margins - 1, 0, None), 0.0)
    return float(max(below.max(initial=0.0), above.max(initial=0.0)))


def train_biased_svm(x: np.ndarray, y, c: float = 1.0, gamma: float | None = None,
                     eps: float = 1e-3, return_alpha: bool = False):
    """RBF soft-margin SVM with class-balanced penalties, solved by SMO.

    ``y`` holds +1/-1 labels.  Returns an :class:`SvmNode` (and the full dual
    vector when ``return_alpha``).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    if set(np.unique(y).tolist()) != {-1, 1}:
        raise ValueError("train_biased_svm needs both +1 and -1 samples")
    if not c > 0:
        raise ValueError("C must be > 0")
    gamma = default_gamma(x) if gamma is None else float(gamma)
    c_pos, c_neg = biased_penalties(y, c)
    cvec = np.where(y > 0, c_pos, c_neg)
    kmat = rbf_kernel(x, x, gamma)
    st = smo_solve(kmat, y, cvec, eps)
    sv = st.alpha > 0
    node = SvmNode(x[sv].copy(), (st.alpha * y)[sv], st.rho, gamma, c_pos, c_neg,
                   iterations=st.iterations, gap=st.gap)
    node.train_margins = y * (kmat[:, sv] @ node.coef - st.rho)
    if return_alpha:
        return node, st.alpha, cvec
    return node


# --------------------------------------------------------------------------
# benefit and indecision threshold
# --------------------------------------------------------------------------

def empirical_benefit(t: float, a) -> float:
    """Average reward of deciding only when ``|f| >= t``: ``e^-a`` if right, ``-e^a`` if wrong."""
    a = np.asarray(a, dtype=float)
    right = np.sum(np.exp(-a[a >= t]))
    wrong = np.sum(np.exp(a[-a >= t]))
    return float((right - wrong) / len(a))


def exp_benefit(t, a):
    """Exponential lower bound of :func:`empirical_benefit`, concave in ``t``."""
    a = np.asarray(a, dtype=float)
    s1 = np.sum(np.exp(-a))
    s2 = np.sum(np.exp(-2 * a))
    t = np.asarray(t, dtype=float)
    return (s1 - np.exp(t) * s2) / len(a) - np.exp(-t)


def feasible_interval(a) -> tuple[float, float] | None:
    """Thresholds in ``[f_min, f_max]`` with ``B_exp(t) >= B_exp(0)``; ``None`` when empty.

    ``B_exp(t) - B_exp(0) = (1 - e^-t)(1 - (S/N) e^t)`` with ``S = sum e^{-2a}``,
    so the benefit constraint holds exactly on ``[0, ln(N/S)]``.
    """
    a = np.asarray(a, dtype=float)
    mag = np.abs(a)
    lo = max(float(mag.min()), 0.0)
    upper = float(np.log(len(a)) - logsumexp(-2 * a))
    hi = min(float(mag.max()), upper)
    if upper < 0 or hi < lo:
        return None
    return lo, hi


def threshold_closed_form(a) -> float:
    """``clip(0.5 ln(N / sum e^{-2a}), feasible interval)``, or 0 when infeasible."""
    a = np.asarray(a, dtype=float)
    box = feasible_interval(a)
    if box is None:
        return 0.0
    tu = 0.5 * float(np.log(len(a)) - logsumexp(-2 * a))
    return float(min(max(tu, box[0]), box[1]))


def _barrier_newton(a, lo, hi, t0, tau0=1.0, mu=10.0, gap_tol=1e-10, newton_tol=1e-12):
    n = len(a)
    s1 = float(np.sum(np.exp(-a)))
    lse2 = float(logsumexp(-2 * a))
    b0 = (s1 - np.exp(lse2)) / n - 1.0

    def bexp(t):
        return s1 / n - np.exp(t + lse2) / n - np.exp(-t)

    def d1(t):
        return -np.exp(t + lse2) / n + np.exp(-t)

    def d2(t):
        return -np.exp(t + lse2) / n - np.exp(-t)

    def phi(t, tau):
        g3 = bexp(t) - b0
        if not (lo < t < hi) or g3 <= 0:
            return np.inf
        return -tau * bexp(t) - np.log(t - lo) - np.log(hi - t) - np.log(g3)

    t = t0
    tau = tau0
    m = 3
    while True:
        for _ in range(100):
            g3 = bexp(t) - b0
            grad = -tau * d1(t) - 1 / (t - lo) + 1 / (hi - t) - d1(t) / g3
            hess = (-tau * d2(t) + 1 / (t - lo) ** 2 + 1 / (hi - t) ** 2
                    - d2(t) / g3 + (d1(t) / g3) ** 2)
            step = -grad / hess
            if 0.5 * grad * grad / hess <= newton_tol:
                break
            s = 1.0
            f0 = phi(t, tau)
            while phi(t + s * step, tau) > f0 + 0.25 * s * grad * step:
                s *= 0.5
                if s < 1e-20:
                    break
            if s < 1e-20:
                break
            t += s * step
        if m / tau < gap_tol:
            return t
        tau *= mu


def optimal_threshold(a) -> float:
    """Indecision threshold maximizing the exponential benefit, by a log-barrier method.

    Constraints: ``f_min <= t <= f_max`` and ``B_exp(t) >= B_exp(0)``.  The
    strictly feasible start is the midpoint of the feasible interval, which is
    known in closed form.  Returns 0 (always decide) when no threshold gains.
    """
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        raise ValueError("need at least one decision value")
    box = feasible_interval(a)
    if box is None:
        return 0.0
    lo, hi = box
    if hi - lo <= 1e-9:
        return lo
    return float(_barrier_newton(a, lo, hi, 0.5 * (lo + hi)))


# --------------------------------------------------------------------------
# hierarchy
# --------------------------------------------------------------------------

@dataclass
class HierarchyNode:
    species: list[str]
    svm: SvmNode | None = None
    pos: "HierarchyNode | None" = None
    neg: "HierarchyNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.svm is None

    def leaves(self) -> list[str]:
        if self.is_leaf:
            return list(self.species)
        return self.pos.leaves() + self.neg.leaves()

    def internal_nodes(self):
        if self.is_leaf:
            return
        yield self
        yield from self.pos.internal_nodes()
        yield from self.neg.internal_nodes()

    def depth_of(self, sp: str) -> int:
        if self.is_leaf:
            return 0
        child = self.pos if sp in self.pos.species else self.neg
        return 1 + child.depth_of(sp)


def _halves(species, counts) -> dict:
    order = sorted(dict.fromkeys(species), key=lambda s: (-counts[s], s))
    half = (len(order) + 1) // 2
    return {s: (1 if k < half else -1) for k, s in enumerate(order)}


def heldout_margins(x: np.ndarray, y: np.ndarray, c: float, gamma: float, folds: int,
                    seed: int = 0, fallback: np.ndarray | None = None) -> np.ndarray:
    """Out-of-fold ``y_i f(x_i)``: each sample scored by an SVM that never saw it.

    Samples whose training fold lacks one of the classes keep ``fallback``
    (the in-sample margins) when given, else 0.
    """
    n = len(x)
    out = np.zeros(n) if fallback is None else np.array(fallback, dtype=float)
    order = np.random.default_rng(seed).permutation(n)
    for k in range(min(folds, n)):
        test = order[k::folds]
        train = np.setdiff1d(order, test)
        if len(set(y[train].tolist())) < 2:
            continue
        node = train_biased_svm(x[train], y[train], c, gamma)
        out[test] = y[test] * node.decision(x[test])
    return out


def build_hierarchy(x: np.ndarray, species, c: float = 1.0, gamma: float | None = None,
                    seed: int = 0, use_thresholds: bool = True,
                    threshold_folds: int = 5) -> HierarchyNode:
    """Grow the binary class tree; every species ends up in exactly one leaf.

    Thresholds are fitted on out-of-fold decision values when
    ``threshold_folds >= 2`` and on the in-sample ones otherwise.
    """
    x = np.asarray(x, dtype=float)
    species = np.asarray(species).astype(str)
    gamma = default_gamma(x) if gamma is None else gamma
    return _grow(x, species, c, gamma, np.random.SeedSequence(seed), use_thresholds, threshold_folds)


def _grow(x, species, c, gamma, seq, use_thresholds, folds):
    names = list(dict.fromkeys(species.tolist()))
    if len(names) == 0:
        raise ValueError("no samples")
    if len(names) == 1:
        return HierarchyNode(names)
    em_seq, pos_seq, neg_seq, cv_seq = seq.spawn(4)
    counts = Counter(species.tolist())
    if len(x) >= 2:
        mog = em_mog2(x, seed=int(em_seq.generate_state(1)[0]))
        y, side = relabel_by_majority(mog.labels, species)
    else:
        side = {}
    if len(set(side.values())) < 2:
        side = _halves(species.tolist(), counts)
        y = np.array([side[s] for s in species.tolist()])
    svm = train_biased_svm(x, y, c, gamma)
    if use_thresholds:
        a = svm.train_margins
        if folds >= 2:
            a = heldout_margins(x, y, c, gamma, folds, int(cv_seq.generate_state(1)[0]), a)
        svm.threshold = optimal_threshold(a)
    pos, neg = y > 0, y < 0
    node = HierarchyNode(names, svm)
    node.pos = _grow(x[pos], species[pos], c, gamma, pos_seq, use_thresholds, folds)
    node.neg = _grow(x[neg], species[neg], c, gamma, neg_seq, use_thresholds, folds)
    return node


@dataclass(frozen=True)
class PartialLabel:
    decisions: tuple[str, ...]    # '+' or '-' per traversed internal node
    complete: bool
    species: str | None           # leaf species when complete

    def sequence(self) -> str:
        parts = list(self.decisions)
        if self.complete:
            parts.append(self.species)
        return "/".join(parts)


def classify_partial(tree: HierarchyNode, feature: np.ndarray,
                     ignore_thresholds: bool = False) -> PartialLabel:
    """Descend from the root, stopping where the decision value falls inside ``(-t*, t*)``."""
    node = tree
    path = []
    while not node.is_leaf:
        f = float(node.svm.decision(feature)[0])
        t = 0.0 if ignore_thresholds else node.svm.threshold
        if abs(f) < t:
            return PartialLabel(tuple(path), False, None)
        if f >= 0:
            path.append("+")
            node = node.pos
        else:
            path.append("-")
            node = node.neg
    return PartialLabel(tuple(path), True, node.species[0])
