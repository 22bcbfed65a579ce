"""Depth-limited binary classification tree with weighted gini splits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_DEPTH = 4
MAX_CANDIDATES = 256


@dataclass(frozen=True)
class DecisionTree:
    """Flat node arrays; ``feature == -1`` marks a leaf.  Rows go left when ``x[f] <= threshold``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    label: np.ndarray

    @classmethod
    def constant(cls, label: int) -> "DecisionTree":
        return cls(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([int(label)]))

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        def rec(i):
            return 0 if self.feature[i] < 0 else 1 + max(rec(self.left[i]), rec(self.right[i]))
        return rec(0)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        node = np.zeros(len(X), dtype=np.int64)
        for _ in range(self.depth):
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                break
            go_left = X[np.arange(len(X)), np.maximum(f, 0)] <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(inner, nxt, node)
        return self.label[node].astype(np.int64)

    def predict_one(self, x0: float, x1: float) -> int:
        i = 0
        x = (x0, x1)
        while self.feature[i] >= 0:
            i = self.left[i] if x[self.feature[i]] <= self.threshold[i] else self.right[i]
        return int(self.label[i])

    def to_array(self) -> np.ndarray:
        return np.stack([self.feature, self.threshold, self.left, self.right, self.label]).astype(np.float64)

    @classmethod
    def from_array(cls, a) -> "DecisionTree":
        a = np.asarray(a, dtype=np.float64)
        i = a[[0, 2, 3, 4]].astype(np.int64)
        return cls(i[0], a[1].copy(), i[1], i[2], i[3])


def _gini(w0, w1):
    tot = w0 + w1
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(tot > 0, w1 / tot, 0.0)
    return tot * 2.0 * p * (1.0 - p)


def _leaf_label(w, y):
    w1 = w[y == 1].sum()
    return 1 if w1 >= w[y == 0].sum() else 0


def _best_split(X, y, w, min_leaf):
    best = (None, None, _gini(w[y == 0].sum(), w[y == 1].sum()))
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs, ys, ws = X[order, f], y[order], w[order]
        c1 = np.cumsum(ws * (ys == 1))
        c0 = np.cumsum(ws * (ys == 0))
        t1, t0 = c1[-1], c0[-1]
        # valid cut positions: between distinct consecutive values
        cut = np.flatnonzero(xs[1:] > xs[:-1])
        cut = cut[(cut + 1 >= min_leaf) & (len(xs) - cut - 1 >= min_leaf)]
        if cut.size == 0:
            continue
        if cut.size > MAX_CANDIDATES:
            cut = cut[np.linspace(0, cut.size - 1, MAX_CANDIDATES).astype(int)]
        imp = _gini(c0[cut], c1[cut]) + _gini(t0 - c0[cut], t1 - c1[cut])
        k = int(np.argmin(imp))
        if imp[k] < best[2] - 1e-12 * max(1.0, best[2]):
            best = (f, 0.5 * (xs[cut[k]] + xs[cut[k] + 1]), imp[k])
    return best


def train_tree(X, y, w=None, max_depth: int = MAX_DEPTH, min_leaf: int = 1) -> DecisionTree:
    """Greedy weighted-gini tree; leaves with equal class weight predict 1."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y) or len(w) != len(y):
        raise ValueError("X, y and w must describe the same rows")
    if not 0 <= max_depth <= MAX_DEPTH:
        raise ValueError(f"max_depth must be in [0, {MAX_DEPTH}]")
    if len(y) == 0:
        return DecisionTree.constant(1)
    feature, threshold, left, right, label = [], [], [], [], []

    def grow(idx, depth):
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        label.append(_leaf_label(w[idx], y[idx]))
        if depth >= max_depth or len(np.unique(y[idx])) < 2:
            return node
        f, thr, _ = _best_split(X[idx], y[idx], w[idx], min_leaf)
        if f is None:
            return node
        mask = X[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        left[node] = grow(idx[mask], depth + 1)
        right[node] = grow(idx[~mask], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    return DecisionTree(np.array(feature), np.array(threshold), np.array(left), np.array(right), np.array(label))
