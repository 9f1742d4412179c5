import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stratus.forest import (LEAF, Forest, ForestConfig, Tree, forest_fit, forest_predict_proba, grow_tree, impurity,
                            mdi)
from stratus import rng

EXACT = dict(bootstrap=False, max_features=1.0)


def gini(labels):
    if len(labels) == 0:
        return 0.0
    p = sum(labels) / len(labels)
    return 1.0 - p * p - (1 - p) * (1 - p)


def brute_force_tree(x, y, min_leaf=1):
    """Greedy tree grown by scanning every (feature, midpoint) pair in plain
    Python.  Returns the fitted positive fraction for every training row."""
    fitted = [None] * len(y)

    def grow(rows):
        labels = [y[r] for r in rows]
        if len(rows) < 2 or len(set(labels)) == 1:
            for r in rows:
                fitted[r] = sum(labels) / len(labels)
            return
        best = None
        for f in range(x.shape[1]):
            values = sorted(set(x[r, f] for r in rows))
            for a, b in zip(values, values[1:]):
                thr = (a + b) / 2
                left = [r for r in rows if x[r, f] <= thr]
                right = [r for r in rows if x[r, f] > thr]
                if len(left) < min_leaf or len(right) < min_leaf:
                    continue
                child = (len(left) * gini([y[r] for r in left]) + len(right) * gini([y[r] for r in right])) / len(rows)
                gain = gini(labels) - child
                if best is None or gain > best[0] + 1e-12:
                    best = (gain, left, right)
        if best is None:
            for r in rows:
                fitted[r] = sum(labels) / len(labels)
            return
        grow(best[1])
        grow(best[2])

    grow(list(range(len(y))))
    return np.array(fitted)


def one_signal(n, n_noise, seed, twin=False):
    g = np.random.default_rng(seed)
    signal = g.normal(size=n)
    y = (signal + 0.5 * g.normal(size=n) > 0).astype(int)
    cols = [signal] + ([signal.copy()] if twin else []) + [g.normal(size=n) for _ in range(n_noise)]
    return np.column_stack(cols), y


class TestImpurity:
    def test_examples(self):
        assert impurity((50, 50), "gini") == pytest.approx(0.5)
        assert impurity((50, 50), "entropy") == pytest.approx(1.0)
        for c in ("gini", "entropy"):
            assert impurity((0, 7), c) == 0.0
            assert impurity((7, 0), c) == 0.0

    def test_empty_node_rejected(self):
        with pytest.raises(ValueError):
            impurity((0, 0))

    @given(st.integers(0, 100), st.integers(0, 100))
    def test_bounds(self, a, b):
        if a + b == 0:
            return
        assert 0.0 <= impurity((a, b), "gini") <= 0.5 + 1e-12
        assert 0.0 <= impurity((a, b), "entropy") <= 1.0 + 1e-12


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(n_estimators=0), dict(criterion="mse"), dict(max_features=0.0),
                                    dict(max_features=1.5), dict(min_samples_split=1), dict(min_samples_leaf=0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            ForestConfig(**kw)

    def test_candidate_counts(self):
        assert ForestConfig().n_candidates(5) == 3
        assert ForestConfig(max_features=0.5).n_candidates(5) == 3
        assert ForestConfig(max_features=1.0).n_candidates(5) == 5


class TestFit:
    def test_separable_single_split(self):
        x = np.array([[-3.0], [-2.0], [-1.0], [1.0], [2.0], [3.0]])
        y = np.array([0, 0, 0, 1, 1, 1])
        forest = forest_fit(x, y, ForestConfig(n_estimators=5, **EXACT))
        for tree in forest.trees:
            assert tree.n_nodes == 3 and tree.threshold[0] == 0.0
        assert np.array_equal(forest_predict_proba(forest, x), y)

    def test_without_randomness_trees_identical(self):
        x, y = one_signal(60, 3, 0)
        forest = forest_fit(x, y, ForestConfig(n_estimators=2, **EXACT))
        a, b = forest.trees
        for name in ("feature", "threshold", "left", "right", "counts"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_same_seed_same_forest(self):
        x, y = one_signal(80, 3, 1)
        p1 = forest_fit(x, y, ForestConfig(n_estimators=6, seed=3))
        p2 = forest_fit(x, y, ForestConfig(n_estimators=6, seed=3))
        p3 = forest_fit(x, y, ForestConfig(n_estimators=6, seed=4))
        assert np.array_equal(forest_predict_proba(p1, x), forest_predict_proba(p2, x))
        assert not np.array_equal(forest_predict_proba(p1, x), forest_predict_proba(p3, x))

    def test_parallel_equals_sequential(self):
        x, y = one_signal(80, 3, 2)
        cfg = ForestConfig(n_estimators=4, seed=1)
        seq = forest_fit(x, y, cfg)
        par = forest_fit(x, y, cfg, n_jobs=2)
        assert np.array_equal(forest_predict_proba(seq, x), forest_predict_proba(par, x))

    def test_identical_rows_give_single_leaf_trees(self):
        x = np.ones((10, 2))
        y = np.array([0, 1] * 5)
        forest = forest_fit(x, y, ForestConfig(n_estimators=3))
        assert all(t.n_nodes == 1 for t in forest.trees)
        imp = mdi(forest)
        assert not imp.normalized and np.all(imp.values == 0)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            forest_fit(np.ones((4, 1)), np.zeros(4, int))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 12), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
    def test_matches_brute_force_tree(self, n, d, min_leaf, seed):
        g = np.random.default_rng(seed)
        x = g.integers(0, 4, size=(n, d)).astype(float)   # small value range forces ties and duplicates
        y = g.integers(0, 2, size=n)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        forest = forest_fit(x, y, ForestConfig(n_estimators=1, min_samples_leaf=min_leaf, **EXACT))
        ours = forest_predict_proba(forest, x)
        oracle = brute_force_tree(x, y, min_leaf)
        assert np.mean((ours - y) ** 2) == pytest.approx(np.mean((oracle - y) ** 2), abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from(["gini", "entropy"]), st.integers(1, 4))
    def test_tree_structure_invariants(self, seed, criterion, min_leaf):
        x, y = one_signal(50, 2, seed)
        tree = grow_tree(x, y, ForestConfig(criterion=criterion, min_samples_leaf=min_leaf), rng.stream(seed, 0))
        internal = tree.feature != LEAF
        assert np.all((tree.left[internal] != LEAF) & (tree.right[internal] != LEAF))
        assert np.all(tree.left[~internal] == LEAF)
        assert np.all(tree.decrease >= 0)
        leaves = tree.apply(x)
        assert np.all(tree.feature[leaves] == LEAF)
        # leaf counts partition the training sample
        per_leaf = np.zeros((tree.n_nodes, 2), int)
        np.add.at(per_leaf, (leaves, y), 1)
        assert np.array_equal(per_leaf[~internal], tree.counts[~internal])
        assert np.all(tree.counts[~internal].sum(axis=1) >= min_leaf)

    def test_bootstrap_indices_recorded(self):
        x, y = one_signal(40, 1, 5)
        forest = forest_fit(x, y, ForestConfig(n_estimators=3, max_samples=25))
        assert all(idx.shape == (25,) for idx in forest.bootstrap_indices)
        assert forest.trees[0].counts[0].sum() == 25


class TestPredict:
    def test_pure_positive_leaves_give_one(self):
        x = np.array([[0.0], [1.0]])
        forest = forest_fit(x, [0, 1], ForestConfig(n_estimators=3, **EXACT))
        assert forest_predict_proba(forest, np.array([[5.0]]))[0] == 1.0

    def test_mean_over_trees(self):
        leaf = lambda frac: Tree(np.array([LEAF]), np.zeros(1), np.array([LEAF]), np.array([LEAF]),
                                 np.array([[1 - frac, frac]]), np.zeros(1))
        trees = tuple([leaf(1)] * 40 + [leaf(0)] * 60)
        forest = Forest(trees, (), ForestConfig(), 1)
        assert forest_predict_proba(forest, np.zeros((3, 1))) == pytest.approx([0.4] * 3)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_probabilities_in_unit_interval(self, seed):
        x, y = one_signal(40, 2, seed)
        forest = forest_fit(x, y, ForestConfig(n_estimators=3, seed=seed))
        p = forest_predict_proba(forest, np.random.default_rng(seed).normal(scale=3, size=(50, 3)))
        assert np.all((p >= 0) & (p <= 1))

    def test_column_mismatch(self):
        x, y = one_signal(20, 1, 0)
        with pytest.raises(ValueError):
            forest_predict_proba(forest_fit(x, y, ForestConfig(n_estimators=1)), np.zeros((2, 3)))

    def test_csv_has_one_row_per_node(self, tmp_path):
        x, y = one_signal(30, 1, 0)
        forest = forest_fit(x, y, ForestConfig(n_estimators=2))
        forest.write_csv(tmp_path / "f.csv")
        lines = (tmp_path / "f.csv").read_text().splitlines()
        assert len(lines) - 1 == sum(t.n_nodes for t in forest.trees)


class TestMDI:
    def test_sums_to_one(self):
        x, y = one_signal(200, 3, 0)
        imp = mdi(forest_fit(x, y, ForestConfig(n_estimators=10)))
        assert imp.normalized and abs(imp.values.sum() - 1) <= 1e-9

    def test_signal_feature_is_largest(self):
        x, y = one_signal(400, 4, 1)
        imp = mdi(forest_fit(x, y, ForestConfig(n_estimators=20, min_samples_leaf=5))).values
        assert np.argmax(imp) == 0

    def test_matches_hand_computed_stump(self):
        x = np.array([[0.0], [1.0], [2.0], [3.0]])
        y = np.array([0, 0, 1, 1])
        forest = forest_fit(x, y, ForestConfig(n_estimators=1, **EXACT))
        # root gini 0.5, both children pure, weight 1
        assert forest.trees[0].decrease[0] == pytest.approx(0.5)

    def test_duplicate_pair_shares(self):
        x, y = one_signal(2000, 2, 7, twin=True)
        imp = mdi(forest_fit(x, y, ForestConfig(n_estimators=30, min_samples_leaf=10))).values
        shares = imp[:2] / imp[:2].sum()
        assert np.all((shares >= 0.3) & (shares <= 0.7)), shares
