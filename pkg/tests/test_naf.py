import numpy as np
import pytest
from hypothesis import given, strategies as st

from idal.naf import NafConfig, NafError, NafModel, fit_naf, retrieve_neighbors, to_distance, vote


def two_clusters(seed, n_per=10, n_features=64, informative=16):
    """Cases in two groups; only some features carry the group, distances are noisy."""
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n_per)
    X = rng.normal(size=(2 * n_per, n_features))
    X[:, :informative] += 3.0 * labels[:, None]
    same = labels[:, None] == labels[None, :]
    d = np.where(same, rng.uniform(0, 200, (2 * n_per,) * 2), rng.uniform(800, 1000, (2 * n_per,) * 2))
    np.fill_diagonal(d, 0.0)
    ids = [f"{'ab'[c]}{i:02d}" for i, c in enumerate(labels)]
    return X, d, labels, ids, rng


def leaf_ids_under(node):
    return {i for leaf in node.leaves() for i in leaf.ids}


def test_to_distance_values():
    assert to_distance(1.0) == 0.0
    assert to_distance(0.0) == 1000.0
    assert to_distance(0.5) == 500.0
    for bad in (-0.01, 1.01, float("nan")):
        with pytest.raises(NafError):
            to_distance(bad)


@given(a=st.floats(0, 1), b=st.floats(0, 1))
def test_to_distance_strictly_decreasing(a, b):
    if b - a > 1e-12:
        assert to_distance(a) > to_distance(b)
    elif a <= b:
        assert to_distance(a) >= to_distance(b)


def test_clean_clusters_split_at_root():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 8)
    X = rng.uniform(0, 1, size=(16, 64)) + 4.0 * labels[:, None]
    d = 1000.0 * (labels[:, None] != labels[None, :])
    ids = [f"c{i:02d}" for i in range(16)]
    m = fit_naf(X, d, NafConfig(seed=3), ids)
    a = {ids[i] for i in range(8)}
    for tree in m.trees:
        assert not tree.is_leaf
        left = leaf_ids_under(tree.left)
        assert left == a or left == set(ids) - a


def test_two_cases_single_leaf():
    m = fit_naf(np.array([[0.0], [1.0]]), np.array([[0, 5.0], [5.0, 0]]), NafConfig(n_trees=4), ["x", "y"])
    for t in m.trees:
        assert t.is_leaf and sorted(t.ids) == ["x", "y"]


def test_depth_limit():
    X, d, _, ids, _ = two_clusters(1)
    m = fit_naf(X, d, NafConfig(n_trees=10, max_depth=1), ids)
    assert max(t.depth() for t in m.trees) <= 1


def test_constant_features_give_single_leaf():
    m = fit_naf(np.ones((6, 3)), np.ones((6, 6)), NafConfig(n_trees=3))
    assert all(t.is_leaf for t in m.trees)


def test_leaf_invariants():
    X, d, _, ids, _ = two_clusters(2)
    cfg = NafConfig(n_trees=20, min_samples_leaf=2)
    m = fit_naf(X, d, cfg, ids)
    for tree in m.trees:
        leaves = list(tree.leaves())
        assert all(len(leaf.ids) >= cfg.min_samples_leaf for leaf in leaves)
        flat = [i for leaf in leaves for i in leaf.ids]
        assert sorted(flat) == sorted(ids)


def test_vote_conservation():
    X, d, _, ids, rng = two_clusters(4)
    m = fit_naf(X, d, NafConfig(n_trees=30), ids)
    q = rng.normal(size=64)
    ranked = retrieve_neighbors(m, q, k=len(ids))
    assert sorted(i for i, _ in ranked) == sorted(ids)

    def reached(node):
        while not node.is_leaf:
            node = node.left if q[node.feature] <= node.threshold else node.right
        return len(node.ids)

    assert sum(v for _, v in ranked) == sum(reached(t) for t in m.trees)


def test_tie_rule_prefers_smaller_id():
    m = fit_naf(np.array([[0.0], [1.0]]), np.zeros((2, 2)), NafConfig(n_trees=2), ["zeta", "alpha"])
    assert retrieve_neighbors(m, [0.5], k=2) == [("alpha", 2), ("zeta", 2)]


def test_determinism_and_roundtrip(tmp_path):
    X, d, _, ids, rng = two_clusters(5)
    a = fit_naf(X, d, NafConfig(n_trees=10, seed=7), ids)
    b = fit_naf(X, d, NafConfig(n_trees=10, seed=7), ids)
    assert a.to_dict() == b.to_dict()
    a.save(tmp_path / "naf.json")
    back = NafModel.load(tmp_path / "naf.json")
    q = rng.normal(size=64)
    assert vote(back, q) == vote(a, q)


def test_asymmetric_input_matches_symmetrized():
    X, d, _, ids, rng = two_clusters(6)
    skew = rng.uniform(-50, 50, d.shape)
    asym = np.clip(d + skew, 0, None)
    sym = 0.5 * (asym + asym.T)
    a = fit_naf(X, asym, NafConfig(n_trees=5), ids)
    b = fit_naf(X, sym, NafConfig(n_trees=5), ids)
    assert a.to_dict() == b.to_dict()


def test_retrieval_within_cluster_rate():
    hits = 0
    for trial in range(50):
        X, d, labels, ids, rng = two_clusters(1000 + trial)
        m = fit_naf(X, d, NafConfig(seed=trial), ids)
        q = rng.normal(size=64)  # drawn like cluster a
        top = retrieve_neighbors(m, q, k=3)
        hits += all(i.startswith("a") for i, _ in top)
    assert hits / 50 >= 0.9


def test_errors():
    with pytest.raises(NafError):
        fit_naf(np.zeros((1, 2)), np.zeros((1, 1)))  # fewer cases than one leaf holds
    with pytest.raises(NafError):
        fit_naf(np.zeros((4, 2)), -np.ones((4, 4)))
    with pytest.raises(NafError):
        fit_naf(np.zeros((4, 2)), np.zeros((3, 3)))
    with pytest.raises(NafError):
        NafConfig(n_trees=0)
    m = fit_naf(np.array([[0.0], [1.0]]), np.zeros((2, 2)), NafConfig(n_trees=1))
    with pytest.raises(NafError):
        retrieve_neighbors(m, [0.0], k=3)
    with pytest.raises(NafError):
        vote(NafModel([], ["0", "1"], NafConfig()), [0.0])
