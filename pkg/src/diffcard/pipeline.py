"""End-to-end training: table in, :class:`EstimatorBundle` out."""

from __future__ import annotations

import logging
import time

import numpy as np

from . import bayesnet
from .bundle import EstimatorBundle, Histograms1d, dataset_hash
from .config import Settings, float_list, int_list, missing_map
from .density import DensityConfig
from .gmm import em_fit
from .mlp import Mlp
from .schedule import DiffusionSchedule, PointCloud
from .score import ScoreModel, TrainConfig, select_epsilon, train
from .selectivity import fit_tree
from .workload import (DataError, dequantize, gen_forest_like, gen_modulo, gen_near_functional, gen_workload,
                       ingest_csv, label_workload, normalize)

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def load_table(s: Settings) -> np.ndarray:
    d = s.data
    if d.source == "csv":
        cols = int_list(d.columns) or None
        table, _ = ingest_csv(d.path, cols, missing_map(d.missing), d.delimiter, d.header)
        return table
    if d.source == "modulo":
        return gen_modulo(d.rows, d.modulus, d.noise_modulus, d.seed)
    if d.source == "near_functional":
        return gen_near_functional(d.rows, seed=d.seed)
    if d.source == "forest_like":
        return gen_forest_like(d.rows, d.seed)
    raise DataError(f"unknown data source {d.source!r}")


def estimate_density_config(s: Settings) -> DensityConfig:
    e = s.estimate
    return DensityConfig(k=e.k, delta_head=e.delta_head or None, delta_tail=e.delta_tail, seed=s.output.seed)


def pointwise_density_config(s: Settings) -> DensityConfig:
    """Resolution for standalone log-density evaluation (finer than the per-query one)."""
    p = s.density
    return DensityConfig(k=p.k, delta_head=p.delta_head or None, delta_tail=p.delta_tail, seed=s.output.seed)


class _Stage:
    def __init__(self, name, timings):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)

    def __exit__(self, et, ev, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if ev is not None and not isinstance(ev, StageError):
            raise StageError(self.name, ev) from ev
        return False


def build_bundle(table, s: Settings = None, tree_workload=None, timings: dict = None) -> EstimatorBundle:
    """Run every training stage on a raw table.

    ``tree_workload`` (a labelled raw-unit workload) replaces the generated
    tree-training queries when given.
    """
    s = s or Settings()
    timings = {} if timings is None else timings
    seed = s.output.seed
    table = np.asarray(table, dtype=np.float64)

    with _Stage("normalize", timings):
        _, meta = normalize(table)
        raw = dequantize(table, meta, seed) if s.data.dequantize else table
        pts = meta.apply(raw)

    cond = None
    with _Stage("detect_dependency", timings):
        if s.bayesnet.enabled and meta.d > 1:
            rep = bayesnet.detect_dependency(pts, s.bayesnet.slices, s.bayesnet.threshold)
            pair = rep.strongest()
            if pair is not None:
                cond = bayesnet.build_cond_histogram(pts, pair[0], pair[1], s.bayesnet.slices, s.bayesnet.bins)
                log.info("conditional histogram for attribute %d given %d (ratio %.4f)",
                         pair[1], pair[0], rep.ratios[pair])
    model_pts = pts if cond is None else np.delete(pts, cond.child, axis=1)

    with _Stage("em_fit", timings):
        g = s.gmm
        rng = np.random.default_rng(seed)
        fit_rows = model_pts
        if len(fit_rows) > g.max_rows:
            fit_rows = fit_rows[rng.choice(len(fit_rows), g.max_rows, replace=False)]
        gmm = em_fit(fit_rows, g.components, g.iterations, seed, g.var_floor, g.resample_var, g.resample_every,
                     g.restarts)
        if cond is not None:
            cond = bayesnet.attach_cache(cond, gmm)

    cloud = PointCloud(model_pts)
    sc = s.schedule
    with _Stage("select_epsilon", timings):
        if sc.epsilon == "auto":
            eps = select_epsilon(cloud, float_list(sc.epsilon_candidates), sc.epsilon_threshold,
                                 steps=sc.probe_steps, seed=seed,
                                 sched_kw={"scheme": sc.scheme, "T": sc.T, "T_trunc": sc.T_trunc})
        else:
            eps = float(sc.epsilon)
        sched = DiffusionSchedule(sc.scheme, sc.T, eps, sc.T_trunc)

    with _Stage("train_scores", timings):
        c = s.score
        d = cloud.d
        rng = np.random.default_rng(c.seed)
        head = Mlp([d + 2] + int_list(c.head_hidden) + [3 * d], "tanh", rng, out_scale=0.1)
        tail = Mlp([d + 2] + int_list(c.tail_hidden) + [d], "tanh", rng, out_scale=0.1)
        model = ScoreModel(sched, d, head, tail)
        cfg = TrainConfig(epochs=c.epochs, steps_per_epoch=c.steps_per_epoch, batch_size=c.batch_size, lr=c.lr,
                          lr_final=c.lr_final, target=c.target, exact_ref_size=c.exact_ref_size, seed=c.seed)
        model, _ = train(model, cloud, cfg)

    with _Stage("histograms", timings):
        hists = Histograms1d.fit(pts, s.estimate.histogram_bins)

    bundle = EstimatorBundle(
        meta, sched, model, gmm, hists, rows=len(table), seed=seed, n_samples=s.estimate.samples,
        density=estimate_density_config(s), cond=cond,
        provenance={"dataset_hash": dataset_hash(table), "seeds": {"output": seed, "score": s.score.seed,
                    "tree": s.tree.seed, "data": s.data.seed}, "config": s.to_dict()},
    )

    with _Stage("train_tree", timings):
        if s.tree.enabled:
            wl = tree_workload
            if wl is None:
                wl = label_workload(table, gen_workload(table, s.tree.queries, s.tree.seed, fractions=(1, 0, 0)))
            bundle.tree = fit_tree(bundle, wl)
    return bundle
