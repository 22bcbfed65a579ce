"""Near-functional attribute pairs modelled by a conditional histogram.

When knowing ``A_i`` pins ``A_j`` to a narrow band, ``A_j`` is removed from the
mixture and the score model and ``p(A_j | A_i)`` is kept as a ``P x B`` table
that is piecewise constant in both attributes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .gmm import Gmm, QueryBox, interval_mass, kernel_box_masses

SLICES = 64
BINS = 64
TRIGGER_RATIO = 0.05
PERCENTILES = (1.0, 99.0)


@dataclass(frozen=True)
class DependencyReport:
    ratios: np.ndarray  # (d, d); entry (i, j) is the mean conditional range of A_j given A_i
    threshold: float = TRIGGER_RATIO

    @property
    def triggered(self) -> np.ndarray:
        t = self.ratios <= self.threshold
        np.fill_diagonal(t, False)
        return t

    def strongest(self):
        """The triggered ``(parent, child)`` pair with the smallest ratio, or None."""
        trig = self.triggered
        if not trig.any():
            return None
        r = np.where(trig, self.ratios, np.inf)
        i, j = np.unravel_index(np.argmin(r), r.shape)
        return int(i), int(j)


def _slice_index(values, edges):
    p = len(edges) - 1
    return np.clip(np.searchsorted(edges, values, side="right") - 1, 0, p - 1)


def detect_dependency(data, P: int = SLICES, threshold: float = TRIGGER_RATIO,
                      pct=PERCENTILES) -> DependencyReport:
    """Mean in-slice range of every attribute relative to its global range."""
    x = np.asarray(data, dtype=np.float64)
    n, d = x.shape
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = hi - lo
    ratios = np.zeros((d, d))
    for i in range(d):
        edges = np.linspace(lo[i], hi[i], P + 1) if span[i] > 0 else np.array([lo[i], lo[i] + 1.0])
        idx = _slice_index(x[:, i], edges)
        order = np.argsort(idx, kind="stable")
        counts = np.bincount(idx, minlength=len(edges) - 1)
        groups = np.split(order, np.cumsum(counts)[:-1])
        for j in range(d):
            if j == i or span[j] == 0:
                continue
            acc = 0.0
            for g in groups:
                if len(g) > 1:
                    a, b = np.percentile(x[g, j], pct)
                    acc += len(g) * (b - a)
            ratios[i, j] = min(1.0, acc / (n * span[j]))
    return DependencyReport(ratios, threshold)


@dataclass(frozen=True)
class CondHistogram:
    parent: int
    child: int
    parent_edges: np.ndarray  # (P + 1,)
    child_edges: np.ndarray  # (B + 1,)
    table: np.ndarray  # (P, B), rows sum to 1
    cache: np.ndarray | None = None  # (N_kernels, P) slice masses of the reduced mixture

    @property
    def P(self) -> int:
        return self.table.shape[0]

    @property
    def B(self) -> int:
        return self.table.shape[1]

    def parent_in_reduced(self) -> int:
        """Index of the parent attribute once the child has been dropped."""
        return self.parent if self.parent < self.child else self.parent - 1

    def child_probs(self, lo: float, hi: float) -> np.ndarray:
        """``P(lo <= A_j <= hi | slice)`` for every parent slice, linear within child bins."""
        e = self.child_edges
        if lo <= e[0] and hi >= e[-1]:
            return np.ones(self.P)
        a, b = np.clip(lo, e[0], e[-1]), np.clip(hi, e[0], e[-1])
        overlap = np.clip(np.minimum(e[1:], b) - np.maximum(e[:-1], a), 0.0, None)
        frac = overlap / np.diff(e)
        return np.clip(self.table @ frac, 0.0, 1.0)

    def slice_of(self, parent_values) -> np.ndarray:
        return _slice_index(np.asarray(parent_values, dtype=np.float64), self.parent_edges)


def build_cond_histogram(data, i: int, j: int, P: int = SLICES, B: int = BINS) -> CondHistogram:
    x = np.asarray(data, dtype=np.float64)
    pi, cj = x[:, i], x[:, j]

    def edges(col, k):
        lo, hi = col.min(), col.max()
        return np.linspace(lo, hi if hi > lo else lo + 1.0, k + 1)

    pe, ce = edges(pi, P), edges(cj, B)
    rows = _slice_index(pi, pe)
    cols = _slice_index(cj, ce)
    counts = np.zeros((P, B))
    np.add.at(counts, (rows, cols), 1.0)
    tot = counts.sum(axis=1, keepdims=True)
    table = np.where(tot > 0, counts / np.where(tot > 0, tot, 1.0), 1.0 / B)
    return CondHistogram(i, j, pe, ce, table)


def slice_masses(g: Gmm, dim: int, edges, lo=-np.inf, hi=np.inf) -> np.ndarray:
    """Kernel mass on every parent slice intersected with ``[lo, hi]``; outer slices reach to infinity."""
    e = np.asarray(edges, dtype=np.float64).copy()
    e[0], e[-1] = -np.inf, np.inf
    e = np.clip(e, lo, hi)
    mu = g.means[:, dim][:, None]
    sd = g.sd[:, dim][:, None]
    return interval_mass((e[None, :-1] - mu) / sd, (e[None, 1:] - mu) / sd)


def attach_cache(hist: CondHistogram, g: Gmm) -> CondHistogram:
    return replace(hist, cache=slice_masses(g, hist.parent_in_reduced(), hist.parent_edges))


def bayes_kernel_g(g: Gmm, hist: CondHistogram, box: QueryBox) -> np.ndarray:
    """Per-kernel mass on the parent axis weighted by the child's conditional box probability."""
    pi = hist.parent_in_reduced()
    lo_i, hi_i = box.lo[hist.parent], box.hi[hist.parent]
    if np.isinf(lo_i) and np.isinf(hi_i) and hist.cache is not None:
        masses = hist.cache
    else:
        masses = slice_masses(g, pi, hist.parent_edges, lo_i, hi_i)
    return masses @ hist.child_probs(box.lo[hist.child], box.hi[hist.child])


def bayes_selectivity(g: Gmm, hist: CondHistogram, box: QueryBox) -> float:
    """Mixture mass of ``box`` where the child attribute is modelled by the histogram."""
    if g.d != box.d - 1:
        raise ValueError("reduced mixture must have one dimension fewer than the box")
    rbox = box.drop_dim(hist.child)
    pi = hist.parent_in_reduced()
    if not box.constrained[hist.child]:
        return float(np.clip(g.weights @ kernel_box_masses(g, rbox), 0.0, 1.0))
    others = [k for k in np.flatnonzero(rbox.constrained) if k != pi]
    rest = kernel_box_masses(g, rbox, dims=others) if others else np.ones(g.N)
    return float(np.clip(g.weights @ (rest * bayes_kernel_g(g, hist, box)), 0.0, 1.0))


def bayes_weights(hist: CondHistogram, parent_values, box: QueryBox) -> np.ndarray:
    """``P(A_j in [a_j, b_j] | slice of z_i)`` for each sampled parent value."""
    probs = hist.child_probs(box.lo[hist.child], box.hi[hist.child])
    return probs[hist.slice_of(parent_values)]
