"""Score network: a QuadNet head for small t and a data-prediction tail for large t.

The head outputs three d-vectors combined as ``v2 / sigma^2 + v1 / sigma + v0``;
the tail outputs a clean-point prediction ``v`` turned into a score as
``v / (sigma^2 k) - x / sigma^2``.  Both networks see ``(x, sigma(t), log sigma(t))``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .mlp import AdamState, Mlp, adam_step
from .schedule import DiffusionSchedule, DomainError, _as_cloud

log = logging.getLogger(__name__)

HEAD = "head"
TAIL = "tail"
# scaling exponents of the head output modules: 1/sigma^2, 1/sigma, 1
QUAD_MODULES = (2, 1, 0)
EXPLORE_HEAD_MAX = 1.0 / 32
EXPLORE_TAIL_MAX = 0.5
EPS_CANDIDATES = (1.0 / 640, 1.0 / 320, 1.0 / 160)


class TrainingError(RuntimeError):
    pass


def default_head_widths(d):
    return [d + 2, 96, 96, 96, 3 * d]


def default_tail_widths(d):
    return [d + 2, 48, 48, d]


def time_features(sched: DiffusionSchedule, x, t):
    x = np.atleast_2d(x)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    s = sched.sigma(t)
    return np.column_stack([x, s, np.log(s)]).astype(np.float32)


class ScoreModel:
    def __init__(self, sched: DiffusionSchedule, d: int, head: Mlp = None, tail: Mlp = None,
                 head_modules=QUAD_MODULES, seed=0):
        self.sched = sched
        self.d = int(d)
        self.head_modules = tuple(head_modules)
        rng = np.random.default_rng(seed)
        self.head = head if head is not None else Mlp(default_head_widths(d), "tanh", rng, out_scale=0.1)
        self.tail = tail if tail is not None else Mlp(default_tail_widths(d), "tanh", rng, out_scale=0.1)
        if self.head.widths[0] != d + 2 or self.head.widths[-1] != len(self.head_modules) * d:
            raise ValueError("head widths do not match dimension / output modules")
        if self.tail.widths[0] != d + 2 or self.tail.widths[-1] != d:
            raise ValueError("tail widths do not match dimension")

    # -- serving -------------------------------------------------------
    def branch_of(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.where(t <= self.sched.T_trunc, HEAD, TAIL)

    def _check_t(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < self.sched.epsilon) or np.any(t > self.sched.T) or not np.all(np.isfinite(t)):
            raise DomainError(f"score time outside [{self.sched.epsilon}, {self.sched.T}]")
        return t

    def head_combine(self, v, t):
        s = self.sched.sigma(t)[:, None]
        v = v.astype(np.float64)
        out = 0.0
        for j, p in enumerate(self.head_modules):
            out = out + v[:, j * self.d:(j + 1) * self.d] / s**p
        return out

    def head_score(self, x, t):
        x = np.atleast_2d(x)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        return self.head_combine(self.head(time_features(self.sched, x, t)), t)

    def tail_v(self, x, t):
        x = np.atleast_2d(x)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        return self.tail(time_features(self.sched, x, t)).astype(np.float64)

    def tail_score(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        k = self.sched.k(t)[:, None]
        s2 = self.sched.sigma2(t)[:, None]
        return self.tail_v(x, t) / (s2 * k) - x / s2

    def score(self, x, t, return_branch=False):
        """Approximate grad log p_t(x); ``t`` is a scalar or one time per row."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        t = np.broadcast_to(self._check_t(t), (xb.shape[0],))
        head = t <= self.sched.T_trunc
        out = np.empty_like(xb)
        if head.any():
            out[head] = self.head_score(xb[head], t[head])
        if (~head).any():
            out[~head] = self.tail_score(xb[~head], t[~head])
        out = out[0] if single else out
        if return_branch:
            br = np.where(head, HEAD, TAIL)
            return out, (br[0] if single else br)
        return out

    __call__ = score

    @property
    def n_bytes(self) -> int:
        return 4 * (self.head.n_params + self.tail.n_params)


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    steps_per_epoch: int = 200
    batch_size: int = 256
    lr: float = 2e-3
    lr_final: float = 2e-4
    target: str = "denoising"
    exact_ref_size: int = 4096
    branches: tuple = (HEAD, TAIL)
    seed: int = 0
    head_explore_max: float = EXPLORE_HEAD_MAX
    tail_explore_max: float = EXPLORE_TAIL_MAX
    final_adjust_frac: float = 0.2

    def phases(self):
        """Per-epoch phase labels: explore, explore, adjust, ... then a run of adjust."""
        n_final = max(1, int(math.ceil(self.final_adjust_frac * self.epochs)))
        n_final = min(n_final, self.epochs)
        pattern = ("explore", "explore", "adjust")
        lead = [pattern[i % 3] for i in range(self.epochs - n_final)]
        return lead + ["adjust"] * n_final


@dataclass
class LossRecord:
    epoch: int
    branch: str
    phase: str
    mean_loss: float


def write_loss_trace(trace, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "branch", "phase", "mean_loss"])
        for r in trace:
            w.writerow([r.epoch, r.branch, r.phase, repr(r.mean_loss)])


def sample_times(sched, branch, phase, n, rng, cfg: TrainConfig):
    if branch == HEAD:
        if phase == "explore":
            lo, hi = math.log(sched.epsilon), math.log(min(cfg.head_explore_max, sched.T_trunc))
            return np.exp(rng.uniform(lo, hi, n))
        return rng.uniform(sched.epsilon, sched.T_trunc, n)
    if phase == "explore":
        return rng.uniform(sched.T_trunc, min(cfg.tail_explore_max, sched.T), n)
    return rng.uniform(sched.T_trunc, sched.T, n)


def mixture_score_rows(sched, ref: np.ndarray, t, x, chunk=2048):
    """Exact perturbed-cloud score with one time per row of ``x``."""
    t = np.asarray(t, dtype=np.float64)
    k = sched.k(t)[:, None]
    s2 = sched.sigma2(t)[:, None]
    ref_sq = np.einsum("ij,ij->i", ref, ref)
    out = np.empty_like(x)
    for lo in range(0, len(x), chunk):
        xs, kk, ss = x[lo:lo + chunk], k[lo:lo + chunk], s2[lo:lo + chunk]
        xx = np.einsum("ij,ij->i", xs, xs)[:, None]
        d2 = xx - 2.0 * (xs @ ref.T) / kk + ref_sq[None, :] / kk**2
        logr = -0.5 * np.maximum(d2, 0.0) / ss
        logr -= logr.max(axis=1, keepdims=True)
        r = np.where(logr > -40.0, np.exp(logr), 0.0)
        r /= r.sum(axis=1, keepdims=True)
        out[lo:lo + chunk] = (r @ ref / kk - xs) / ss
    return out


def _batch(sched, pts, branch, phase, cfg, rng, ref):
    """Sample (x, t, score-space target, clean point) for one minibatch."""
    n = cfg.batch_size
    t = sample_times(sched, branch, phase, n, rng, cfg)
    src = ref if cfg.target == "exact" else pts
    x0 = src[rng.integers(0, len(src), n)]
    k = sched.k(t)[:, None]
    s = sched.sigma(t)[:, None]
    z = rng.standard_normal(x0.shape)
    x = x0 / k + s * z
    if cfg.target == "exact":
        target = mixture_score_rows(sched, ref, t, x)
    elif cfg.target == "denoising":
        target = -z / s
    else:
        raise ValueError(f"unknown target mode {cfg.target!r}")
    return x, t, target


def _head_step(model: ScoreModel, x, t, target, state):
    sched = model.sched
    feats = time_features(sched, x, t)
    out, acts = model.head.forward_cached(feats)
    pred = model.head_combine(out, t)
    w = sched.beta2
    resid = pred - target
    loss = w * np.mean(np.sum(resid**2, axis=1))
    g = 2.0 * w * resid / len(x)
    s = sched.sigma(t)[:, None]
    gout = np.concatenate([g / s**p for p in model.head_modules], axis=1)
    grads = model.head.backward(feats, gout, acts)
    adam_step(model.head, grads, state)
    return loss


def _tail_step(model: ScoreModel, x, t, target, state):
    sched = model.sched
    k = sched.k(t)[:, None]
    s2 = sched.sigma2(t)[:, None]
    # clean-point target so that the weighted v-loss equals the score-space loss
    v_target = k * (s2 * target + x)
    wgt = sched.beta2 / (s2**2 * k**2)
    feats = time_features(sched, x, t)
    out, acts = model.tail.forward_cached(feats)
    resid = out.astype(np.float64) - v_target
    loss = np.mean(np.sum(wgt * resid**2, axis=1))
    grads = model.tail.backward(feats, 2.0 * wgt * resid / len(x), acts)
    adam_step(model.tail, grads, state)
    return loss


def train(model: ScoreModel, cloud, config: TrainConfig = None, on_epoch=None):
    """Fit the head and/or tail networks; returns ``(model, loss_trace)``."""
    cfg = config or TrainConfig()
    cloud = _as_cloud(cloud)
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    if cloud.d != model.d:
        raise ValueError(f"cloud has dimension {cloud.d}, model expects {model.d}")
    rng = np.random.default_rng(cfg.seed)
    pts = cloud.points
    ref = pts
    if cfg.target == "exact" and len(pts) > cfg.exact_ref_size:
        ref = pts[rng.choice(len(pts), cfg.exact_ref_size, replace=False)]
    states = {b: AdamState.for_net(model.head if b == HEAD else model.tail, lr=cfg.lr)
              for b in cfg.branches}
    steps = {HEAD: _head_step, TAIL: _tail_step}
    trace = []
    total = cfg.epochs * cfg.steps_per_epoch
    done = 0
    for epoch, phase in enumerate(cfg.phases()):
        for branch in cfg.branches:
            losses = []
            for i in range(cfg.steps_per_epoch):
                frac = (done + i) / max(total - 1, 1)
                states[branch].lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * frac))
                x, t, target = _batch(model.sched, pts, branch, phase, cfg, rng, ref)
                loss = steps[branch](model, x, t, target, states[branch])
                if not np.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss in {branch} branch, epoch {epoch} ({phase}), step {i}; "
                        f"t range [{t.min():.3g}, {t.max():.3g}]"
                    )
                losses.append(loss)
            rec = LossRecord(epoch, branch, phase, float(np.mean(losses)))
            trace.append(rec)
            log.debug("epoch %d %s %s loss %.5g", epoch, branch, phase, rec.mean_loss)
            if on_epoch is not None:
                on_epoch(rec)
        done += cfg.steps_per_epoch
    return model, trace


# -- evaluation ---------------------------------------------------------------

def branch_loss(model: ScoreModel, cloud, branch, n=2048, seed=123, ref_size=4096):
    """Held-out beta^2-weighted loss of one branch against the exact cloud score.

    Returns ``(model_loss, zero_network_loss)``; the zero network outputs 0 for
    the head and ``-x / sigma^2`` for the tail.
    """
    cloud = _as_cloud(cloud)
    rng = np.random.default_rng(seed)
    pts = cloud.points
    ref = pts if len(pts) <= ref_size else pts[rng.choice(len(pts), ref_size, replace=False)]
    sched = model.sched
    cfg = TrainConfig(batch_size=n)
    t = sample_times(sched, branch, "adjust", n, rng, cfg)
    x0 = ref[rng.integers(0, len(ref), n)]
    x = x0 / sched.k(t)[:, None] + sched.sigma(t)[:, None] * rng.standard_normal(x0.shape)
    exact = mixture_score_rows(sched, ref, t, x)
    if branch == HEAD:
        pred = model.head_score(x, t)
        zero = np.zeros_like(x)
    else:
        pred = model.tail_score(x, t)
        zero = -x / sched.sigma2(t)[:, None]
    w = sched.beta2
    return (w * np.mean(np.sum((pred - exact) ** 2, axis=1)),
            w * np.mean(np.sum((zero - exact) ** 2, axis=1)))


def probe_loss(cloud, epsilon, sched_kw=None, steps=300, seed=0, n_eval=1024, ref_size=2048):
    """Short head-only training run at one early-stop time.

    Returns the normalized error ``mean sigma^2(t) |s - score|^2 / d`` over
    t log-uniform on ``[epsilon, 1/32]``; a zero network scores about 1.
    """
    cloud = _as_cloud(cloud)
    kw = dict(sched_kw or {})
    sched = DiffusionSchedule(epsilon=epsilon, **kw)
    model = ScoreModel(sched, cloud.d, seed=seed)
    cfg = TrainConfig(epochs=1, steps_per_epoch=steps, target="exact", branches=(HEAD,),
                      exact_ref_size=ref_size, seed=seed, final_adjust_frac=0.0)
    model, _ = train(model, cloud, cfg)
    rng = np.random.default_rng(seed + 1)
    pts = cloud.points
    ref = pts if len(pts) <= ref_size else pts[rng.choice(len(pts), ref_size, replace=False)]
    t = np.exp(rng.uniform(math.log(epsilon), math.log(EXPLORE_HEAD_MAX), n_eval))
    x0 = ref[rng.integers(0, len(ref), n_eval)]
    x = x0 / sched.k(t)[:, None] + sched.sigma(t)[:, None] * rng.standard_normal(x0.shape)
    err = model.head_score(x, t) - mixture_score_rows(sched, ref, t, x)
    return float(np.mean(sched.sigma2(t) * np.sum(err**2, axis=1)) / cloud.d)


def select_epsilon(cloud, candidates=EPS_CANDIDATES, threshold=1.0, probe=None, **probe_kw):
    """Smallest candidate whose probe error is below ``threshold``, else the largest."""
    cands = sorted(float(c) for c in candidates)
    if not cands:
        raise ValueError("no epsilon candidates")
    probe = probe or (lambda eps: probe_loss(cloud, eps, **probe_kw))
    for eps in cands:
        loss = probe(eps)
        log.info("epsilon probe %.6g -> %.4g", eps, loss)
        if loss < threshold:
            return eps
    return cands[-1]
