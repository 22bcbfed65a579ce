import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffcard.tree import MAX_DEPTH, DecisionTree, train_tree


def weighted_acc(tree, X, y, w):
    return float(w @ (tree.predict(X) == y) / w.sum())


class TestTrainTree:
    def test_all_gmm(self, rng):
        X = rng.normal(size=(200, 2))
        t = train_tree(X, np.zeros(200, dtype=int), rng.uniform(0.1, 1, 200))
        assert t.n_nodes == 1 and t.label[0] == 0

    def test_single_class_one(self, rng):
        t = train_tree(rng.normal(size=(50, 2)), np.ones(50, dtype=int))
        assert t.n_nodes == 1 and t.label[0] == 1

    def test_recovers_volume_threshold(self, rng):
        grid = np.linspace(-12, 0, 121)
        step = grid[1] - grid[0]
        X = np.column_stack([rng.uniform(-10, 0, grid.size), grid])
        y = (grid > -5.05).astype(int)
        t = train_tree(X, y)
        assert t.feature[0] == 1
        assert abs(t.threshold[0] - (-5.05)) <= step
        assert weighted_acc(t, X, y, np.ones(len(y))) == 1.0

    def test_beats_majority_on_holdout(self):
        r = np.random.default_rng(4)
        X = r.normal(size=(3000, 2))
        p = 1 / (1 + np.exp(-3 * (X[:, 0] - 0.5 * X[:, 1])))
        y = (r.random(3000) < p).astype(int)
        w = r.uniform(0.2, 2.0, 3000)
        t = train_tree(X[:2000], y[:2000], w[:2000])
        Xh, yh, wh = X[2000:], y[2000:], w[2000:]
        majority = max(wh[yh == 1].sum(), wh[yh == 0].sum()) / wh.sum()
        assert weighted_acc(t, Xh, yh, wh) >= majority

    def test_weights_change_the_leaf(self):
        X = np.zeros((3, 2))
        assert train_tree(X, [0, 0, 1], [1, 1, 5]).label[0] == 1
        assert train_tree(X, [0, 0, 1], [3, 3, 5]).label[0] == 0

    def test_tie_keeps_correction(self):
        assert train_tree(np.zeros((2, 2)), [0, 1], [1.0, 1.0]).label[0] == 1

    def test_empty_input(self):
        assert train_tree(np.zeros((0, 2)), np.zeros(0, dtype=int)).label[0] == 1

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            train_tree(np.zeros((3, 2)), [0, 1])
        with pytest.raises(ValueError):
            train_tree(np.zeros((3, 2)), [0, 1, 0], max_depth=5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(10, 400))
    def test_depth_limit_and_consistency(self, seed, n):
        r = np.random.default_rng(seed)
        X = np.round(r.normal(size=(n, 2)), 1)
        y = r.integers(0, 2, n)
        t = train_tree(X, y, r.uniform(0, 1, n))
        assert t.depth <= MAX_DEPTH
        assert set(np.unique(t.label)) <= {0, 1}
        batch = t.predict(X)
        np.testing.assert_array_equal(batch, [t.predict_one(a, b) for a, b in X])


class TestDecisionTree:
    def test_constant(self):
        t = DecisionTree.constant(0)
        np.testing.assert_array_equal(t.predict(np.ones((4, 2))), 0)
        assert t.depth == 0

    def test_array_round_trip(self, rng):
        X = rng.normal(size=(300, 2))
        t = train_tree(X, (X[:, 0] * X[:, 1] > 0).astype(int))
        u = DecisionTree.from_array(t.to_array())
        np.testing.assert_array_equal(u.predict(X), t.predict(X))
        np.testing.assert_array_equal(u.threshold, t.threshold)

    def test_split_direction(self):
        t = train_tree(np.array([[0.0, 0.0], [0.0, 1.0]]), [0, 1])
        assert t.predict_one(0.0, 0.5) == 0
        assert t.predict_one(0.0, 0.51) == 1
