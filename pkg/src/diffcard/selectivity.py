"""Query answering: mixture prediction, importance-sampling correction and gating.

For a box V the corrected estimate is

    Sel = Q * mean_i exp(log p_eps(x_i) - log q_eps(x_i)),   x_i ~ q_eps(. | V)

with ``Q`` the mass of V under the unperturbed mixture.  When a near-functional
pair has been split off, ``Q`` and the sample weights come from the
conditional histogram instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .bayesnet import bayes_selectivity, bayes_weights
from .density import log_density
from .gmm import QueryBox, integrate_box, log_q, sample_conditional
from .tree import DecisionTree, train_tree

GMM_ONLY = "gmm_only"
CORRECTED = "corrected"
BAYES_CORRECTED = "bayes_corrected"
HISTOGRAM_1D = "histogram_1d"

LOG_RATIO_CAP = 30.0
MAX_DROP_FRAC = 0.5


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Estimate:
    selectivity: float
    cardinality: float
    path: str
    n_samples: int = 0
    n_dropped: int = 0
    cap_hits: int = 0
    wall_ms: float = 0.0
    q_gmm: float = float("nan")


def _finish(bundle, sel, path, t0, **kw) -> Estimate:
    sel = float(np.clip(sel, 0.0, 1.0))
    card = sel * bundle.rows
    if card < 0.5:
        card = 0.0
    return Estimate(sel, card, path, wall_ms=(time.perf_counter() - t0) * 1e3, **kw)


def predict_q(bundle, box: QueryBox) -> float:
    """Mixture mass of the box, through the conditional histogram when one is attached."""
    if bundle.cond is not None:
        return bayes_selectivity(bundle.gmm, bundle.cond, box)
    return integrate_box(bundle.gmm, box)


def query_volume(bundle, box: QueryBox) -> float:
    """Fraction of the attribute ranges covered by the box."""
    lo = np.clip(box.lo, bundle.meta.norm_min, bundle.meta.norm_max)
    hi = np.clip(box.hi, bundle.meta.norm_min, bundle.meta.norm_max)
    span = np.where(bundle.norm_span > 0, bundle.norm_span, 1.0)
    return float(np.prod(np.clip(hi - lo, 0.0, None) / span))


def _seeds(seed):
    ss = np.random.SeedSequence(int(seed) & (2**63 - 1)).spawn(2)
    return ss[0], int(ss[1].generate_state(1, dtype=np.uint64)[0])


def gmm_estimate(bundle, box: QueryBox) -> Estimate:
    t0 = time.perf_counter()
    q = predict_q(bundle, box)
    return _finish(bundle, q, GMM_ONLY, t0, q_gmm=q)


def adc_estimate(bundle, box: QueryBox, n: int = None, seed: int = 0, density_fn=None) -> Estimate:
    """Mixture mass corrected by the mean density ratio over ``n`` conditional samples.

    ``density_fn(points, seed)`` overrides the score-based log density (used
    to plug in known densities).
    """
    t0 = time.perf_counter()
    n = bundle.n_samples if n is None else int(n)
    if n < 1:
        raise ValueError("n must be at least 1")
    q = predict_q(bundle, box)
    path = CORRECTED if bundle.cond is None else BAYES_CORRECTED
    if q <= 0:
        return _finish(bundle, 0.0, path, t0, q_gmm=q)
    sample_seed, density_seed = _seeds(seed)
    sbox = box if bundle.cond is None else box.drop_dim(bundle.cond.child)
    x = sample_conditional(bundle.gmm_eps, sbox, n, sample_seed)
    if density_fn is None:
        logp = log_density(bundle.model, x, bundle.scheme, bundle.density, seed=density_seed)
    else:
        logp = np.asarray(density_fn(x, density_seed), dtype=np.float64)
    lr = logp - log_q(bundle.gmm_eps, x)
    ok = np.isfinite(lr)
    dropped = int(n - ok.sum())
    if dropped > MAX_DROP_FRAC * n:
        raise EstimationError(f"{dropped} of {n} density ratios were not finite")
    cap_hits = int(np.count_nonzero(lr[ok] > LOG_RATIO_CAP))
    ratio = np.exp(np.minimum(lr[ok], LOG_RATIO_CAP))
    if bundle.cond is None:
        corr = ratio.mean()
    else:
        w = bayes_weights(bundle.cond, x[ok, bundle.cond.parent_in_reduced()], box)
        corr = (w @ ratio) / w.sum() if w.sum() > 0 else 1.0
    return _finish(bundle, q * corr, path, t0, n_samples=n, n_dropped=dropped, cap_hits=cap_hits, q_gmm=q)


def histogram_1d_estimate(bundle, box: QueryBox) -> Estimate:
    t0 = time.perf_counter()
    dims = np.flatnonzero(box.constrained)
    if len(dims) != 1:
        raise ValueError("the histogram path needs exactly one constrained attribute")
    j = int(dims[0])
    return _finish(bundle, bundle.hists.mass_between(j, box.lo[j], box.hi[j]), HISTOGRAM_1D, t0)


def adc_plus_estimate(bundle, box: QueryBox, n: int = None, seed: int = 0, tree: DecisionTree = None,
                      density_fn=None) -> Estimate:
    """Histogram for single-attribute boxes; otherwise the tree decides whether to correct."""
    t0 = time.perf_counter()
    tree = bundle.tree if tree is None else tree
    if tree is None:
        raise ValueError("no decision tree available")
    if np.count_nonzero(box.constrained) == 1:
        return histogram_1d_estimate(bundle, box)
    q = predict_q(bundle, box)
    vol = query_volume(bundle, box)
    if q <= 0 or vol <= 0:
        return _finish(bundle, q, GMM_ONLY, t0, q_gmm=q)
    if tree.predict_one(np.log(q), np.log(vol)) == 0:
        return _finish(bundle, q, GMM_ONLY, t0, q_gmm=q)
    return adc_estimate(bundle, box, n, seed, density_fn)


def empty_estimate() -> Estimate:
    return Estimate(0.0, 0.0, GMM_ONLY)


def query_seed(bundle, query_id: int) -> int:
    return int(bundle.seed) ^ int(query_id)


def estimate_box(bundle, box, mode: str, n=None, seed=0) -> Estimate:
    if box is None:
        return empty_estimate()
    if mode == "gmm":
        return gmm_estimate(bundle, box)
    if mode == "adc":
        return adc_estimate(bundle, box, n, seed)
    if mode == "adc+":
        return adc_plus_estimate(bundle, box, n, seed)
    raise ValueError(f"unknown mode {mode!r}")


def estimate_workload(bundle, wl, mode: str = "adc+", n=None, threads: int = 1):
    """Estimates for every query, in workload order; seeds derive from query ids."""
    boxes = [bundle.meta.box(wl.lo[q], wl.hi[q]) for q in range(len(wl))]

    def one(q):
        return estimate_box(bundle, boxes[q], mode, n, query_seed(bundle, wl.ids[q]))

    if threads <= 1:
        return [one(q) for q in range(len(wl))]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(one, range(len(wl))))


# -- gating tree ---------------------------------------------------------------

def tree_training_set(bundle, wl, n=None):
    """Features ``(log Q, log vol)``, labels and weights from a labelled workload."""
    from .workload import q_error

    feats, labels, weights = [], [], []
    floor = 0.5 / bundle.rows
    for q in range(len(wl)):
        box = bundle.meta.box(wl.lo[q], wl.hi[q])
        if box is None or np.count_nonzero(box.constrained) <= 1:
            continue
        g = gmm_estimate(bundle, box)
        vol = query_volume(bundle, box)
        if g.selectivity <= 0 or vol <= 0:
            continue
        a = adc_estimate(bundle, box, n, query_seed(bundle, wl.ids[q]))
        qa = q_error(wl.cards[q], a.cardinality)
        qg = q_error(wl.cards[q], g.cardinality)
        la = np.log(max(a.selectivity, floor))
        lg = np.log(max(g.selectivity, floor))
        feats.append((np.log(g.selectivity), np.log(vol)))
        labels.append(1 if qa < qg else 0)
        weights.append(abs(la * la - lg * lg))
    return np.array(feats).reshape(-1, 2), np.array(labels, dtype=np.int64), np.array(weights)


def fit_tree(bundle, wl, n=None, min_queries: int = 100) -> DecisionTree:
    X, y, w = tree_training_set(bundle, wl, n)
    if len(y) < min_queries:
        raise ValueError(f"need at least {min_queries} multi-attribute training queries, got {len(y)}")
    if w.sum() <= 0:
        return DecisionTree.constant(1)
    return train_tree(X, y, w)
