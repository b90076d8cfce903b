import csv
import filecmp

import numpy as np
import pytest

from fishrec.synthgen import GenConfig, SpeciesSpec, default_species, gen_dataset, generate, render


def test_default_counts_and_trajectories():
    cfg = GenConfig()
    rows = [(r[0], r[3], r[4]) for r in generate(GenConfig(images_per_species=7))]
    assert len(rows) == 35
    assert cfg.n_species * cfg.images_per_species == 500
    by_traj = {}
    for _, sp, tid in rows:
        by_traj.setdefault(tid, set()).add(sp)
    assert all(len(s) == 1 for s in by_traj.values())
    sizes = [sum(1 for r in rows if r[2] == t) for t in by_traj]
    assert max(sizes) <= 5


def test_dataset_files_and_determinism(tmp_path):
    cfg = GenConfig(n_species=2, images_per_species=4, seed=11)
    a = gen_dataset(cfg, tmp_path / "a")
    b = gen_dataset(cfg, tmp_path / "b")
    rows = list(csv.DictReader(open(a / "labels.csv")))
    assert len(rows) == 8 and set(rows[0]) == {"filename", "species", "trajectory_id"}
    names = [r["filename"] for r in rows]
    for sub in ("images", "masks"):
        match, mismatch, errors = filecmp.cmpfiles(a / sub, b / sub, names, shallow=False)
        assert len(match) == 8 and not mismatch and not errors
    assert (a / "labels.csv").read_bytes() == (b / "labels.csv").read_bytes()


def test_seed_changes_output():
    a = next(generate(GenConfig(n_species=1, images_per_species=1, seed=1)))
    b = next(generate(GenConfig(n_species=1, images_per_species=1, seed=2)))
    assert not np.array_equal(a[1], b[1])


def test_flip_mirrors_silhouette():
    spec = default_species(3)[1]
    cfg = GenConfig(noise=0.0)
    pose = {"cx": 0.5, "cy": 0.5, "angle": 0.0, "scale": 1.0, "flip": False,
            "tone": 1.0, "bg": (0.1, 0.1, 0.1), "occluder": None}
    _, m0 = render(spec, pose, cfg, np.random.default_rng(0))
    _, m1 = render(spec, dict(pose, flip=True), cfg, np.random.default_rng(0))
    assert m0.any()
    np.testing.assert_array_equal(m1, np.fliplr(m0))


def test_flip_probability_one_flips_all():
    base = dict(n_species=1, images_per_species=6, rotation=0.0, occlusion_prob=0.0, seed=5)
    for (_, _, m0, _, _), (_, _, m1, _, _) in zip(generate(GenConfig(flip_prob=0.0, **base)),
                                                 generate(GenConfig(flip_prob=1.0, **base))):
        cols0 = np.nonzero(m0.any(axis=0))[0]
        cols1 = np.nonzero(m1.any(axis=0))[0]
        # the tail is on the left unless flipped: compare where the mass sits
        c0 = np.average(np.arange(m0.shape[1]), weights=m0.sum(axis=0))
        c1 = np.average(np.arange(m1.shape[1]), weights=m1.sum(axis=0))
        mid0 = (cols0[0] + cols0[-1]) / 2
        mid1 = (cols1[0] + cols1[-1]) / 2
        assert np.sign(c0 - mid0) == -np.sign(c1 - mid1)


def test_mask_is_silhouette_minus_occluder():
    cfg = GenConfig(noise=0.0)
    spec = default_species(1)[0]
    pose = {"cx": 0.5, "cy": 0.5, "angle": 0.1, "scale": 1.0, "flip": False,
            "tone": 1.0, "bg": (0.2, 0.2, 0.2), "occluder": (0.5, 0.5, 0.1, 0.3)}
    _, mask = render(spec, pose, cfg, np.random.default_rng(0))
    img, full = render(spec, dict(pose, occluder=None), cfg, np.random.default_rng(0))
    assert (mask <= full).all() and mask.sum() < full.sum()
    bg = np.array(pose["bg"]) + (np.arange(cfg.height)[:, None] + 0.5)[..., None] / cfg.height * 0.15
    outside = ~full
    np.testing.assert_allclose(img[outside], np.broadcast_to(bg, img.shape)[outside])


def test_imbalance_sizes():
    sizes = GenConfig(images_per_species=100, imbalance=10.0).class_sizes()
    assert sizes[0] == 100 and sizes[-1] == 10
    assert sizes == sorted(sizes, reverse=True)


def test_gray_output():
    _, img, _, _, _ = next(generate(GenConfig(n_species=1, images_per_species=1, color=False)))
    assert img.ndim == 2 and 0 <= img.min() and img.max() <= 1


def test_invalid_configs():
    with pytest.raises(ValueError):
        GenConfig(flip_prob=1.5)
    with pytest.raises(ValueError):
        GenConfig(n_species=0)
    huge = SpeciesSpec("big", (0.9, 0.4), 0.4, (), "plain", 5.0, 0.2, (0.5, 0.5, 0.5), (0.3, 0.3, 0.3))
    with pytest.raises(ValueError):
        list(generate(GenConfig(n_species=1, images_per_species=1, species=(huge,))))
