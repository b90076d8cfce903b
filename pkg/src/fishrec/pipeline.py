"""End-to-end glue: part learning, feature extraction, classifier training and prediction."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .classifier import HierarchyNode, PartialLabel, build_hierarchy, classify_partial
from .config import PipelineConfig
from .descriptor import FULL_RECT, assemble_feature
from .evaluation import PredictionRecord, compute_metrics, flat_svm_baseline
from .imaging import Sample, UnusableSample, rescale_to_bbox, to_gray
from .partmodel import PartModel, RegionCache, detect_parts, train_part_model

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    name: str
    image: np.ndarray
    mask: np.ndarray
    species: str
    trajectory_id: str


def prepare(samples, cfg: PipelineConfig) -> list[Prepared]:
    """Crop every sample to its mask and bound its size; unusable samples are skipped."""
    out = []
    for s in samples:
        img = s.image
        if cfg.color == "false" and img.ndim == 3:
            img = to_gray(img)
        try:
            img, msk = rescale_to_bbox(img, s.mask, cfg.max_side)
        except UnusableSample as err:
            log.warning("skipping %s: %s", s.name, err)
            continue
        out.append(Prepared(s.name, img, msk, s.species, s.trajectory_id))
    if cfg.color == "true" and out and out[0].image.ndim != 3:
        raise ValueError("color features requested but the images are grayscale")
    return out


def features_from_rects(image: np.ndarray, rects, model: PartModel,
                        cache: RegionCache | None = None) -> np.ndarray:
    cache = cache or RegionCache(image, model.pca)
    desc = cache(list(rects) + [FULL_RECT])
    parts = {i: (r, desc[i]) for i, r in enumerate(rects)}
    return assemble_feature(image, parts, model.pca, model.k)


def image_feature(image: np.ndarray, mask: np.ndarray, model: PartModel) -> np.ndarray:
    cache = RegionCache(image, model.pca)
    rects, _ = detect_parts(image, mask, model, cache)
    return features_from_rects(image, rects, model, cache)


_WORKER_MODEL: PartModel | None = None


def _worker_init(model):
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _worker_feature(item):
    image, mask = item
    return image_feature(image, mask, _WORKER_MODEL)


def detect_features(items: list[Prepared], model: PartModel, workers: int = 1) -> np.ndarray:
    """Feature vectors of unseen images (parts detected with the frozen model)."""
    if not items:
        return np.zeros((0, 0))
    pairs = [(p.image, p.mask) for p in items]
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(model,)) as ex:
            rows = list(ex.map(_worker_feature, pairs, chunksize=4))
    else:
        rows = [image_feature(img, msk, model) for img, msk in pairs]
    return np.stack(rows)


def training_features(items: list[Prepared], model: PartModel, workers: int = 1) -> np.ndarray:
    """Features of the training images, using the learned layouts where available."""
    learned = dict(zip(model.names, model.rects))
    rows = [None] * len(items)
    missing = []
    for k, p in enumerate(items):
        if p.name in learned:
            rows[k] = features_from_rects(p.image, learned[p.name], model)
        else:
            missing.append(k)
    if missing:
        det = detect_features([items[k] for k in missing], model, workers)
        for k, row in zip(missing, det):
            rows[k] = row
    return np.stack(rows)


def kfold_indices(n: int, folds: int, seed: int):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    return [np.sort(f) for f in np.array_split(perm, min(folds, n))]


def select_c(x: np.ndarray, y, cfg: PipelineConfig) -> tuple[float, dict]:
    """Pick C from the grid by k-fold accuracy of the full (threshold-free) hierarchy."""
    y = np.asarray(y).astype(str)
    if len(cfg.c_grid) == 1:
        return float(cfg.c_grid[0]), {}
    folds = kfold_indices(len(y), cfg.cv_folds, cfg.seed)
    scores = {}
    for c in cfg.c_grid:
        accs = []
        for f, test in enumerate(folds):
            train = np.setdiff1d(np.arange(len(y)), test)
            if len(set(y[train].tolist())) < 1 or len(test) == 0:
                continue
            tree = build_hierarchy(x[train], y[train], c, cfg.gamma_value(),
                                   seed=cfg.seed, use_thresholds=False)
            pred = [classify_partial(tree, row, ignore_thresholds=True).species for row in x[test]]
            accs.append(float(np.mean(np.array(pred) == y[test])))
        scores[c] = float(np.mean(accs))
        log.info("C=%g: %d-fold accuracy %.4f (folds %s)", c, len(folds), scores[c],
                 ", ".join(f"{a:.3f}" for a in accs))
    best = max(cfg.c_grid, key=lambda c: (scores[c], -c))
    return float(best), scores


@dataclass
class TrainedPipeline:
    model: PartModel
    tree: HierarchyNode
    c: float
    cv_scores: dict
    config: PipelineConfig


def train_pipeline(samples, cfg: PipelineConfig, callback=None) -> TrainedPipeline:
    items = prepare(samples, cfg)
    if len(items) < 2:
        raise ValueError("need at least 2 usable training samples")
    model = train_part_model([p.image for p in items], [p.mask for p in items],
                             cfg.learn_config(), names=[p.name for p in items], callback=callback)
    x = training_features(items, model, cfg.workers)
    y = [p.species for p in items]
    c, scores = select_c(x, y, cfg)
    tree = build_hierarchy(x, y, c, cfg.gamma_value(), seed=cfg.seed,
                           use_thresholds=cfg.use_thresholds, threshold_folds=cfg.threshold_folds)
    return TrainedPipeline(model, tree, c, scores, cfg)


def predict_records(trained: TrainedPipeline, samples, workers: int = 1,
                    ignore_thresholds: bool = False) -> list[PredictionRecord]:
    items = prepare(samples, trained.config)
    x = detect_features(items, trained.model, workers)
    return [PredictionRecord(p.name, p.trajectory_id, p.species,
                             classify_partial(trained.tree, row, ignore_thresholds))
            for p, row in zip(items, x)]


def leaf_paths(tree: HierarchyNode) -> dict[str, tuple[str, ...]]:
    out = {}

    def walk(node, path):
        if node.is_leaf:
            out[node.species[0]] = tuple(path)
            return
        walk(node.pos, path + ["+"])
        walk(node.neg, path + ["-"])

    walk(tree, [])
    return out


# --------------------------------------------------------------------------
# benchmark
# --------------------------------------------------------------------------

def split_by_trajectory(samples, frac: float = 0.7, seed: int = 0):
    """Per species, shuffle trajectories and send about ``frac`` of the images to training."""
    rng = np.random.default_rng(seed)
    by_species: dict[str, dict[str, list[Sample]]] = {}
    for s in samples:
        by_species.setdefault(s.species, {}).setdefault(s.trajectory_id, []).append(s)
    train, test = [], []
    for sp in sorted(by_species):
        trajs = sorted(by_species[sp])
        order = rng.permutation(len(trajs))
        total = sum(len(v) for v in by_species[sp].values())
        taken = 0
        for k in order:
            group = by_species[sp][trajs[k]]
            if taken < frac * total:
                train.extend(group)
                taken += len(group)
            else:
                test.extend(group)
    return train, test


def run_benchmark(samples, cfg: PipelineConfig, frac: float = 0.7) -> dict:
    """Train on a trajectory-disjoint split and compare partial, full and flat classification."""
    t0 = time.time()
    train, test = split_by_trajectory(samples, frac, cfg.seed)
    history = []
    trained = train_pipeline(train, cfg, callback=lambda it, br: history.append(br.total))
    t_train = time.time() - t0
    items = prepare(test, cfg)
    x_test = detect_features(items, trained.model, cfg.workers)
    partial = [PredictionRecord(p.name, p.trajectory_id, p.species, classify_partial(trained.tree, row))
               for p, row in zip(items, x_test)]
    full = [PredictionRecord(p.name, p.trajectory_id, p.species,
                             classify_partial(trained.tree, row, ignore_thresholds=True))
            for p, row in zip(items, x_test)]
    tr_items = prepare(train, cfg)
    x_train = training_features(tr_items, trained.model, cfg.workers)
    flat_pred = flat_svm_baseline(x_train, [p.species for p in tr_items], x_test,
                                  trained.c, cfg.gamma_value())
    flat = [PredictionRecord(p.name, p.trajectory_id, p.species, PartialLabel((), True, sp))
            for p, sp in zip(items, flat_pred)]
    mp, mf, mb = compute_metrics(partial), compute_metrics(full), compute_metrics(flat)
    return {
        "k": cfg.k,
        "n_train": len(train),
        "n_test": len(test),
        "AC_partial": mp.ac,
        "AC_full": mf.ac,
        "AC_flat": mb.ac,
        "PD": mp.pd,
        "AP_partial": mp.ap,
        "AR_partial": mp.ar,
        "C": trained.c,
        "thresholds": [n.svm.threshold for n in trained.tree.internal_nodes()],
        "iterations": trained.model.iterations,
        "converged": trained.model.converged,
        "J": [trained.model.history[0].total] + history,
        "train_seconds": t_train,
        "total_seconds": time.time() - t0,
        "reports": {"partial": mp, "full": mf, "flat": mb},
        "trained": trained,
    }


def k_sweep(samples, cfg: PipelineConfig, ks=(4, 6, 8, 10), frac: float = 0.7) -> list[dict]:
    rows = []
    for k in ks:
        res = run_benchmark(samples, cfg.with_overrides(k=k), frac)
        rows.append({key: res[key] for key in ("k", "AC_partial", "AC_full", "AC_flat", "PD",
                                                "iterations", "total_seconds")})
    return rows


def sweep_table(rows) -> str:
    lines = ["   K  AC_partial  AC_full  AC_flat     PD  iters  seconds"]
    for r in rows:
        lines.append(f"{r['k']:4d}  {r['AC_partial']:10.4f}  {r['AC_full']:7.4f}  {r['AC_flat']:7.4f}"
                     f"  {r['PD']:5.3f}  {r['iterations']:5d}  {r['total_seconds']:7.1f}")
    return "\n".join(lines) + "\n"
