import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fishrec.classifier import (HierarchyNode, PartialLabel, biased_penalties, build_hierarchy,
                                classify_partial, em_mog2, empirical_benefit, exp_benefit,
                                feasible_interval, heldout_margins, kkt_violation,
                                optimal_threshold, rbf_kernel, relabel_by_majority,
                                threshold_closed_form, train_biased_svm)


def blobs(rng, centers, n, spread=0.3):
    x = np.concatenate([rng.normal(c, spread, (n, len(c))) for c in centers])
    lab = np.repeat(np.arange(len(centers)), n)
    return x, lab


def grid_argmax(a, lo, hi, step=1e-4):
    ts = np.arange(lo, hi + step / 2, step)
    ts = ts[(ts >= lo) & (ts <= hi)]
    return float(ts[np.argmax(exp_benefit(ts, a))])


# ---------------------------------------------------------------- mixture

def test_em_separates_blobs():
    rng = np.random.default_rng(0)
    x, lab = blobs(rng, [(0, 0, 0), (5, 5, 5)], 40)
    mog = em_mog2(x, seed=1)
    assign = mog.labels
    assert len(set(assign[lab == 0])) == 1 and len(set(assign[lab == 1])) == 1
    assert assign[0] != assign[-1]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_em_loglik_monotone(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, 4)) + (rng.random((30, 1)) > 0.5) * 2
    ll = em_mog2(x, seed=seed, restarts=2).loglik
    assert all(b >= a - 1e-8 * max(1, abs(a)) for a, b in zip(ll, ll[1:]))


def test_em_deterministic_and_rejects_single_sample():
    x = np.random.default_rng(1).normal(size=(25, 3))
    assert (em_mog2(x, seed=4).labels == em_mog2(x, seed=4).labels).all()
    with pytest.raises(ValueError):
        em_mog2(x[:1])


def test_relabel_majority():
    assign = np.array([1, 1, 0, 0, 0, 1, 0, 1])
    species = np.array(["a", "a", "a", "b", "b", "b", "c", "c"])
    y, side = relabel_by_majority(assign, species)
    assert side == {"a": 1, "b": -1, "c": -1}
    assert y.tolist() == [1, 1, 1, -1, -1, -1, -1, -1]


# ---------------------------------------------------------------- svm

def test_penalty_example():
    y = np.array([1] * 10 + [-1] * 90)
    assert biased_penalties(y, 1.0) == (0.9, 0.1)


@given(st.integers(1, 200), st.integers(1, 200), st.floats(0.01, 100))
def test_penalty_identity(npos, nneg, c):
    y = np.array([1] * npos + [-1] * nneg)
    cp, cn = biased_penalties(y, c)
    n = npos + nneg
    assert cp * npos + cn * nneg == pytest.approx(2 * c * npos * nneg / n, rel=1e-12)


def test_single_class_rejected():
    with pytest.raises(ValueError):
        train_biased_svm(np.zeros((4, 2)), np.ones(4))


def test_separable_zero_error_and_kkt():
    rng = np.random.default_rng(2)
    x, lab = blobs(rng, [(0, 0), (3, 3)], 40, 0.4)
    y = np.where(lab == 0, -1, 1)
    node, alpha, cvec = train_biased_svm(x, y, 10.0, return_alpha=True)
    assert np.all(np.sign(node.decision(x)) == y)
    assert kkt_violation(alpha, node.train_margins, cvec) <= 1e-3
    assert np.all(alpha >= 0) and np.all(alpha <= cvec + 1e-12)
    assert abs(alpha @ y) < 1e-8


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_kkt_on_noisy_unbalanced(seed):
    rng = np.random.default_rng(seed)
    npos = int(rng.integers(3, 20))
    x = np.concatenate([rng.normal(0, 1, (npos, 3)), rng.normal(0.8, 1, (60, 3))])
    y = np.array([1] * npos + [-1] * 60)
    node, alpha, cvec = train_biased_svm(x, y, 1.0, return_alpha=True)
    assert kkt_violation(alpha, node.train_margins, cvec) <= 1e-3


def test_label_flip_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 4))
    y = np.where(x[:, 0] + 0.3 * rng.normal(size=50) > 0, 1, -1)
    a = train_biased_svm(x, y, 1.0, 0.5)
    b = train_biased_svm(x, -y, 1.0, 0.5)
    probe = rng.normal(size=(20, 4))
    np.testing.assert_allclose(a.decision(probe), -b.decision(probe), atol=2e-3)
    np.testing.assert_allclose(a.train_margins, b.train_margins, atol=2e-3)


def test_duplicated_samples_same_function():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(40, 3))
    y = np.where(x[:, 1] > 0, 1, -1)
    a = train_biased_svm(x, y, 2.0, 0.5)
    # every sample twice: the same problem as half the penalty per copy
    b = train_biased_svm(np.vstack([x, x]), np.concatenate([y, y]), 1.0, 0.5)
    probe = rng.normal(size=(15, 3))
    np.testing.assert_allclose(a.decision(probe), b.decision(probe), atol=5e-3)


def test_rbf_kernel_values():
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    k = rbf_kernel(a, a, 2.0)
    np.testing.assert_allclose(k, [[1, np.exp(-2)], [np.exp(-2), 1]])


# ---------------------------------------------------------------- benefit

def test_benefit_examples():
    assert empirical_benefit(0.0, [1.0, 1.0]) == pytest.approx(np.exp(-1))
    assert empirical_benefit(0.0, [-1.0]) == pytest.approx(-np.exp(-1))
    assert empirical_benefit(5.0, [1.0, -2.0, 0.5]) == 0.0
    assert exp_benefit(0.0, [0.0]) == pytest.approx(-1.0)


@settings(max_examples=50)
@given(st.integers(0, 2 ** 32 - 1))
def test_exp_benefit_is_lower_bound(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(0.8, 1.2, int(rng.integers(10, 201)))
    ts = np.arange(0, np.abs(a).max() + 1, 1e-3)
    eb = exp_benefit(ts, a)
    b = np.array([empirical_benefit(t, a) for t in ts])
    assert np.all(eb <= b + 1e-12)


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=30))
def test_exp_benefit_concave(vals):
    a = np.array(vals)
    ts = np.linspace(0, 3, 61)
    eb = exp_benefit(ts, a)
    assert np.all(np.diff(eb, 2) <= 1e-9)


def test_threshold_examples():
    assert optimal_threshold(np.zeros(7)) == 0.0
    assert threshold_closed_form(np.zeros(7)) == 0.0
    # confident mistakes: every threshold loses against deciding everything
    a = np.array([-3.0, -2.5, 2.0])
    assert feasible_interval(a) is None
    assert optimal_threshold(a) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_threshold_matches_grid_and_closed_form(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(rng.uniform(0, 1.5), rng.uniform(0.2, 1.5), int(rng.integers(10, 201)))
    box = feasible_interval(a)
    t = optimal_threshold(a)
    if box is None:
        assert t == 0.0
        return
    lo, hi = box
    assert lo - 1e-12 <= t <= hi + 1e-12
    assert abs(t - grid_argmax(a, lo, hi)) <= 1e-3
    assert t == pytest.approx(threshold_closed_form(a), abs=1e-6)
    assert exp_benefit(t, a) >= exp_benefit(0.0, a) - 1e-12


def test_threshold_interior_equals_unclipped():
    a = np.array([-0.2, 0.1, 0.3, 0.9, 1.4, 2.0, 2.5, 3.0])
    tu = 0.5 * np.log(len(a) / np.sum(np.exp(-2 * a)))
    lo, hi = feasible_interval(a)
    assert lo < tu < hi
    assert optimal_threshold(a) == pytest.approx(tu, abs=1e-6)


# ---------------------------------------------------------------- hierarchy

@pytest.fixture(scope="module")
def four_species():
    rng = np.random.default_rng(5)
    x, lab = blobs(rng, [(0, 0), (0, 1.5), (6, 0), (6, 1.5)], 25, 0.35)
    return x, np.array([f"s{k}" for k in lab])


def test_single_species_leaf():
    tree = build_hierarchy(np.zeros((3, 2)), ["a"] * 3)
    assert tree.is_leaf and tree.leaves() == ["a"]
    lab = classify_partial(tree, np.zeros(2))
    assert lab == PartialLabel((), True, "a")


def test_two_species_root_with_leaves():
    rng = np.random.default_rng(6)
    x, lab = blobs(rng, [(0, 0), (4, 4)], 20)
    tree = build_hierarchy(x, np.where(lab == 0, "a", "b"), 10.0)
    assert not tree.is_leaf and tree.pos.is_leaf and tree.neg.is_leaf
    assert sorted(tree.leaves()) == ["a", "b"]


def test_hierarchy_leaves_and_grouping(four_species):
    x, sp = four_species
    tree = build_hierarchy(x, sp, 10.0, seed=1)
    assert sorted(tree.leaves()) == ["s0", "s1", "s2", "s3"]
    top = {frozenset(tree.pos.species), frozenset(tree.neg.species)}
    assert top == {frozenset({"s0", "s1"}), frozenset({"s2", "s3"})}
    assert len(list(tree.internal_nodes())) == 3


def test_hierarchy_deterministic(four_species):
    x, sp = four_species
    a = build_hierarchy(x, sp, 1.0, seed=3)
    b = build_hierarchy(x, sp, 1.0, seed=3)
    assert [n.svm.threshold for n in a.internal_nodes()] == [n.svm.threshold for n in b.internal_nodes()]
    assert [classify_partial(a, r) for r in x] == [classify_partial(b, r) for r in x]


def test_degenerate_split_falls_back_to_halves():
    x = np.zeros((9, 2))
    sp = ["a"] * 4 + ["b"] * 3 + ["c"] * 2
    x[:, 0] = np.arange(9) * 1e-3
    tree = build_hierarchy(x, sp, 1.0)
    assert sorted(tree.leaves()) == ["a", "b", "c"]


def test_partial_zero_thresholds_equal_full(four_species):
    x, sp = four_species
    tree = build_hierarchy(x, sp, 1.0, seed=2)
    flat = build_hierarchy(x, sp, 1.0, seed=2, use_thresholds=False)
    assert all(n.svm.threshold == 0 for n in flat.internal_nodes())
    for row in x:
        full = classify_partial(tree, row, ignore_thresholds=True)
        assert full.complete
        assert classify_partial(flat, row) == full


def test_partial_stops_at_root(four_species):
    x, sp = four_species
    tree = build_hierarchy(x, sp, 1.0, seed=2)
    probe = x[0]
    tree.svm.threshold = abs(float(tree.svm.decision(probe)[0])) + 1.0
    lab = classify_partial(tree, probe)
    assert lab.decisions == () and not lab.complete and lab.species is None


def test_confident_sample_full_depth(four_species):
    x, sp = four_species
    tree = build_hierarchy(x, sp, 1.0, seed=2)
    for n in tree.internal_nodes():
        n.svm.threshold = 0.0
    lab = classify_partial(tree, x[0])
    assert lab.complete and len(lab.decisions) == tree.depth_of(lab.species)
    assert lab.sequence().endswith(lab.species)


def test_heldout_margins_never_see_sample():
    rng = np.random.default_rng(7)
    x, lab = blobs(rng, [(0, 0), (3, 0)], 15)
    y = np.where(lab == 0, -1, 1)
    a = heldout_margins(x, y, 10.0, 0.5, 5)
    node = train_biased_svm(x, y, 10.0, 0.5)
    # in-sample margins of a hard-margin fit sit at or above 1; held-out ones need not
    assert node.train_margins.min() > 1 - 1e-2
    assert a.shape == (30,) and not np.allclose(a, node.train_margins)


def test_hierarchy_node_depth():
    leaf_a, leaf_b, leaf_c = HierarchyNode(["a"]), HierarchyNode(["b"]), HierarchyNode(["c"])
    dummy = train_biased_svm(np.array([[0.0], [1.0]]), np.array([-1, 1]), 1.0, 1.0)
    inner = HierarchyNode(["b", "c"], dummy, leaf_b, leaf_c)
    root = HierarchyNode(["a", "b", "c"], dummy, leaf_a, inner)
    assert root.depth_of("a") == 1 and root.depth_of("c") == 2
