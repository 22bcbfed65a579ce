import dataclasses
import time

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from diffcard.gmm import QueryBox, integrate_box, log_q
from diffcard.pipeline import build_bundle
from diffcard.schedule import DiffusionSchedule
from diffcard.selectivity import (BAYES_CORRECTED, CORRECTED, GMM_ONLY, HISTOGRAM_1D, LOG_RATIO_CAP, EstimationError,
                                  adc_estimate, adc_plus_estimate, estimate_box, estimate_workload, fit_tree,
                                  gmm_estimate, histogram_1d_estimate, query_volume)
from diffcard.tree import DecisionTree
from diffcard.workload import gen_forest_like, gen_workload, label_workload, q_error

from conftest import tiny_settings

BOX = QueryBox([-0.8, -0.5, -np.inf, 0.0], [0.4, 0.9, np.inf, 1.2])


def own_density(bundle):
    return lambda x, seed: log_q(bundle.gmm_eps, x)


class TestAdc:
    def test_ratio_one_returns_q(self, tiny_bundle):
        q = integrate_box(tiny_bundle.gmm, BOX)
        for n in (1, 17, 256):
            e = adc_estimate(tiny_bundle, BOX, n, seed=n, density_fn=own_density(tiny_bundle))
            assert e.selectivity == pytest.approx(q, rel=1e-12)
            assert e.path == CORRECTED and e.n_samples == n


    def test_zero_mass(self, tiny_bundle):
        e = adc_estimate(tiny_bundle, QueryBox([40.0, -np.inf, -np.inf, -np.inf], [41.0, np.inf, np.inf, np.inf]))
        assert e.selectivity == 0.0 and e.cardinality == 0.0

    def test_small_cardinality_rounds_to_zero(self, tiny_bundle):
        e = adc_estimate(tiny_bundle, BOX, 8, density_fn=lambda x, s: log_q(tiny_bundle.gmm_eps, x) - 20)
        assert e.selectivity > 0 and e.cardinality == 0.0

    def test_cap_hits(self, tiny_bundle):
        e = adc_estimate(tiny_bundle, BOX, 16, density_fn=lambda x, s: np.full(len(x), 1e3))
        assert e.cap_hits == 16 and e.selectivity == 1.0

    def test_dropped_samples(self, tiny_bundle):
        def half_nan(x, s):
            out = log_q(tiny_bundle.gmm_eps, x)
            out[::4] = np.nan
            return out

        e = adc_estimate(tiny_bundle, BOX, 40, density_fn=half_nan)
        assert e.n_dropped == 10
        with pytest.raises(EstimationError):
            adc_estimate(tiny_bundle, BOX, 40, density_fn=lambda x, s: np.full(len(x), np.nan))

    def test_n_validation(self, tiny_bundle):
        with pytest.raises(ValueError):
            adc_estimate(tiny_bundle, BOX, 0)

    def test_seeded(self, tiny_bundle):
        a, b = adc_estimate(tiny_bundle, BOX, 32, seed=4), adc_estimate(tiny_bundle, BOX, 32, seed=4)
        assert a.selectivity == b.selectivity

    def test_bayes_path(self, functional_bundle):
        b = functional_bundle
        box = b.meta.box([-np.inf, 0.0, -np.inf, -np.inf], [np.inf, 1.0, np.inf, np.inf])
        e = adc_estimate(b, box, 64, density_fn=own_density(b))
        assert e.path == BAYES_CORRECTED
        assert e.selectivity == pytest.approx(e.q_gmm, rel=1e-12)


@pytest.fixture(scope="module")
def exact_gaussian(tiny_bundle):
    """Bundle whose mixture is fitted to N(0, 0.4^2 I) data, with a negligible early-stopping time."""
    r = np.random.default_rng(0)
    data = r.normal(0, 0.4, (20_000, 4))
    from diffcard.gmm import em_fit

    g = em_fit(data, N=6, iters=40, seed=0)
    sched = DiffusionSchedule("VP", 3.0, 1e-7, 0.125)
    b = dataclasses.replace(tiny_bundle, gmm=g, sched=sched, cond=None, tree=None)
    s2 = 0.16 * float(sched.k(sched.epsilon)) ** -2 + float(sched.sigma2(sched.epsilon))
    pstar = multivariate_normal(np.zeros(4), s2 * np.eye(4))
    return b, (lambda x, seed: pstar.logpdf(x))


class TestImportanceSampling:
    def test_unbiased(self, exact_gaussian):
        b, dens = exact_gaussian
        box = QueryBox([-0.3, -0.5, -np.inf, 0.1], [0.4, 0.2, np.inf, 0.9])
        truth = multivariate_normal(np.zeros(3), 0.16 * np.eye(3))
        lo, hi = box.lo[[0, 1, 3]], box.hi[[0, 1, 3]]
        corners = np.array(np.meshgrid(*zip(lo, hi), indexing="ij")).reshape(3, -1).T
        signs = np.prod(np.where(np.array(np.meshgrid(*[[0, 1]] * 3, indexing="ij")).reshape(3, -1).T, 1, -1), axis=1)
        exact = float(np.sum(signs * truth.cdf(corners)))
        est = np.array([adc_estimate(b, box, 64, seed=s, density_fn=dens).selectivity for s in range(100)])
        se = est.std(ddof=1) / np.sqrt(len(est))
        assert abs(est.mean() - exact) < 3 * se + 1e-6

    def test_variance_drops_with_n(self, tiny_bundle):
        dens = lambda x, s: log_q(tiny_bundle.gmm_eps, x) + 0.3 * np.sin(3 * x[:, 0])
        v = [np.var([adc_estimate(tiny_bundle, BOX, n, seed=s, density_fn=dens).selectivity for s in range(60)])
             for n in (64, 256)]
        assert v[1] < v[0]


class TestAdcPlus:
    def test_constant_one_tree(self, tiny_bundle):
        one = DecisionTree.constant(1)
        a = adc_plus_estimate(tiny_bundle, BOX, 32, seed=9, tree=one)
        b = adc_estimate(tiny_bundle, BOX, 32, seed=9)
        assert dataclasses.replace(a, wall_ms=0) == dataclasses.replace(b, wall_ms=0)

    def test_constant_zero_tree(self, tiny_bundle):
        e = adc_plus_estimate(tiny_bundle, BOX, tree=DecisionTree.constant(0))
        assert e.path == GMM_ONLY
        assert e.selectivity == integrate_box(tiny_bundle.gmm, BOX)

    def test_single_attribute_uses_histogram(self, tiny_bundle):
        box = QueryBox([-np.inf, -0.2, -np.inf, -np.inf], [np.inf, 0.5, np.inf, np.inf])
        e = adc_plus_estimate(tiny_bundle, box, tree=DecisionTree.constant(1))
        assert e.path == HISTOGRAM_1D

    def test_needs_tree(self, tiny_bundle):
        with pytest.raises(ValueError):
            adc_plus_estimate(dataclasses.replace(tiny_bundle, tree=None), BOX)

    def test_volume(self, tiny_bundle):
        assert query_volume(tiny_bundle, QueryBox.full(4)) == pytest.approx(1.0)
        lo, hi = tiny_bundle.meta.norm_min, tiny_bundle.meta.norm_max
        mid = 0.5 * (lo + hi)
        box = QueryBox(np.where(np.arange(4) < 2, lo, -np.inf), np.where(np.arange(4) < 2, mid, np.inf))
        assert query_volume(tiny_bundle, box) == pytest.approx(0.25)


class TestHistogramPath:
    def test_full_range(self, tiny_bundle):
        box = QueryBox([-np.inf, -5, -np.inf, -np.inf], [np.inf, 5, np.inf, np.inf])
        assert histogram_1d_estimate(tiny_bundle, box).selectivity == pytest.approx(1.0)

    def test_needs_one_attribute(self, tiny_bundle):
        with pytest.raises(ValueError):
            histogram_1d_estimate(tiny_bundle, BOX)

    def test_forest_single_attribute_queries(self):
        table = gen_forest_like(20_000, seed=8)
        b = build_bundle(table, tiny_settings(tree__enabled=False, estimate__histogram_bins=1024,
                                              score__epochs=1, score__steps_per_epoch=5))
        wl = label_workload(table, gen_workload(table, 2500, seed=2))
        wl = wl.subset(wl.constrained.sum(axis=1) == 1)
        wl = wl.subset(np.arange(len(wl)) < 200)
        assert len(wl) == 200
        est = [histogram_1d_estimate(b, b.meta.box(wl.lo[q], wl.hi[q])).cardinality for q in range(len(wl))]
        assert np.median(q_error(wl.cards, est)) <= 1.1


@pytest.fixture(scope="module")
def gaussian2d():
    r = np.random.default_rng(5)
    table = r.multivariate_normal([0, 0], [[1.0, 0.6], [0.6, 1.0]], 10_000)
    s = tiny_settings(tree__enabled=False, score__epochs=8, score__steps_per_epoch=100,
                      score__head_hidden="48,48", score__tail_hidden="32", estimate__samples=64)
    return table, build_bundle(table, s)


class TestGaussianData:
    def test_full_box_normalisation(self, gaussian2d):
        # the estimate is clipped to 1, so read the unclipped correction factor
        _, b = gaussian2d
        e = adc_estimate(b, QueryBox.full(2), 256, seed=0)
        assert e.q_gmm == pytest.approx(1.0)
        assert 0.7 <= e.selectivity <= 1.0
        lo = adc_estimate(b, QueryBox([-np.inf, -np.inf], [0.0, np.inf]), 256, seed=0)
        assert 0.7 <= lo.selectivity / lo.q_gmm <= 1.3

    def test_median_q_error(self, gaussian2d):
        table, b = gaussian2d
        wl = label_workload(table, gen_workload(table, 500, seed=1))
        est = estimate_workload(b, wl, "adc")
        assert np.median(q_error(wl.cards, [e.cardinality for e in est])) <= 1.5


class TestWorkload:
    def test_paths_and_order(self, tiny_bundle, tiny_table):
        wl = gen_workload(tiny_table, 80, seed=1)
        seq = estimate_workload(tiny_bundle, wl, "adc+")
        par = estimate_workload(tiny_bundle, wl, "adc+", threads=3)
        assert [e.cardinality for e in seq] == [e.cardinality for e in par]
        assert {e.path for e in seq} <= {GMM_ONLY, CORRECTED, HISTOGRAM_1D}
        assert all(e.path == GMM_ONLY for e in estimate_workload(tiny_bundle, wl, "gmm"))

    def test_estimates_in_range(self, tiny_bundle, tiny_table):
        for e in estimate_workload(tiny_bundle, gen_workload(tiny_table, 40, seed=2), "adc"):
            assert 0 <= e.selectivity <= 1 and e.cardinality >= 0

    def test_empty_box(self, tiny_bundle):
        assert estimate_box(tiny_bundle, None, "adc").cardinality == 0.0

    def test_unknown_mode(self, tiny_bundle):
        with pytest.raises(ValueError):
            estimate_box(tiny_bundle, BOX, "exact")

    def test_gmm_estimate(self, tiny_bundle):
        e = gmm_estimate(tiny_bundle, BOX)
        assert e.selectivity == integrate_box(tiny_bundle.gmm, BOX) and e.path == GMM_ONLY


class TestFitTree:
    def test_too_few_queries(self, tiny_bundle, tiny_table):
        wl = label_workload(tiny_table, gen_workload(tiny_table, 30, seed=0))
        with pytest.raises(ValueError):
            fit_tree(tiny_bundle, wl)

    def test_fitted_tree(self, tiny_bundle):
        assert tiny_bundle.tree is not None and tiny_bundle.tree.depth <= 4
