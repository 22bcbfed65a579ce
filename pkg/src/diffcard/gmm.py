"""Diagonal Gaussian mixtures: EM fitting, box integration and truncated sampling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, ndtr

from .quasirandom import norm_inv_cdf
from .schedule import DiffusionSchedule

VAR_FLOOR = 1e-6
RESAMPLE_VAR = 0.05
RESAMPLE_EVERY = 10


class ZeroMassError(ValueError):
    """The query box has no mass under the mixture; callers should answer 0."""


@dataclass(frozen=True)
class Gmm:
    weights: np.ndarray  # (N,)
    means: np.ndarray  # (N, d)
    variances: np.ndarray  # (N, d)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        mu = np.array(self.means, dtype=np.float64)
        var = np.array(self.variances, dtype=np.float64)
        if mu.ndim != 2 or var.shape != mu.shape or w.shape != (mu.shape[0],):
            raise ValueError("Gmm needs weights (N,), means (N, d) and variances (N, d)")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise ValueError("Gmm parameters must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be nonnegative and sum to 1 (sum={w.sum()!r})")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def N(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.variances)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def drop_dim(self, j: int) -> "Gmm":
        keep = [i for i in range(self.d) if i != j]
        return Gmm(self.weights, self.means[:, keep], self.variances[:, keep])


class QueryBox:
    """Closed per-dimension intervals; ``-inf``/``+inf`` mark unconstrained sides."""

    def __init__(self, lo, hi):
        lo = np.array(lo, dtype=np.float64).ravel()
        hi = np.array(hi, dtype=np.float64).ravel()
        if lo.shape != hi.shape:
            raise ValueError("lo and hi must have the same length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo > hi):
            raise ValueError(f"invalid box: need lo <= hi, got {lo} / {hi}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        self.lo, self.hi = lo, hi

    @classmethod
    def full(cls, d: int) -> "QueryBox":
        return cls(np.full(d, -np.inf), np.full(d, np.inf))

    @property
    def d(self) -> int:
        return self.lo.size

    @property
    def constrained(self) -> np.ndarray:
        return np.isfinite(self.lo) | np.isfinite(self.hi)

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=1)

    def drop_dim(self, j: int) -> "QueryBox":
        keep = [i for i in range(self.d) if i != j]
        return QueryBox(self.lo[keep], self.hi[keep])

    def __repr__(self):
        return f"QueryBox(lo={self.lo.tolist()}, hi={self.hi.tolist()})"


def interval_mass(lo, hi):
    """``Phi(hi) - Phi(lo)`` evaluated on the tail that keeps precision."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    upper = lo > 0
    m = np.where(upper, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))
    return np.maximum(m, 0.0)


def dim_masses(g: Gmm, lo, hi, dims=None) -> np.ndarray:
    """Per-kernel, per-dimension interval masses, shape ``(N, len(dims))``."""
    dims = np.arange(g.d) if dims is None else np.asarray(dims, dtype=int)
    mu = g.means[:, dims]
    sd = g.sd[:, dims]
    lo = np.asarray(lo, dtype=np.float64)[dims]
    hi = np.asarray(hi, dtype=np.float64)[dims]
    return interval_mass((lo - mu) / sd, (hi - mu) / sd)


def kernel_box_masses(g: Gmm, box: QueryBox, dims=None) -> np.ndarray:
    """``prod_j P_i(a_j <= x_j <= b_j)`` for each kernel, optionally over a subset of dims."""
    if box.d != g.d:
        raise ValueError(f"box has {box.d} dims, mixture has {g.d}")
    if dims is None:
        dims = np.flatnonzero(box.constrained)
    if len(dims) == 0:
        return np.ones(g.N)
    return np.prod(dim_masses(g, box.lo, box.hi, dims), axis=1)


def integrate_box(g: Gmm, box: QueryBox) -> float:
    return float(np.clip(g.weights @ kernel_box_masses(g, box), 0.0, 1.0))


def _log_kernels(g: Gmm, x):
    inv = 1.0 / g.variances
    lhs = np.concatenate([x * x, x], axis=1)
    rhs = np.concatenate([-0.5 * inv, g.means * inv], axis=1)
    const = -0.5 * np.sum(g.means**2 * inv + np.log(2 * np.pi * g.variances), axis=1)
    out = lhs @ rhs.T
    out += const
    return out


def log_q(g: Gmm, x):
    """Log mixture density at each row of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    with np.errstate(divide="ignore"):
        out = logsumexp(_log_kernels(g, xb) + np.log(g.weights), axis=1)
    return float(out[0]) if single else out


def score_q(g: Gmm, x):
    """Gradient of ``log_q`` at each row of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    with np.errstate(divide="ignore"):
        lr = _log_kernels(g, xb) + np.log(g.weights)
    r = np.exp(lr - lr.max(axis=1, keepdims=True))
    r /= r.sum(axis=1, keepdims=True)
    inv = 1.0 / g.variances
    out = r @ (g.means * inv) - xb * (r @ inv)
    return out[0] if single else out


def sample(g: Gmm, n: int, seed=None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    comp = rng.choice(g.N, size=n, p=g.weights)
    return g.means[comp] + g.sd[comp] * rng.standard_normal((n, g.d))


def _truncated_std(alpha, beta, u):
    """Standard normal restricted to ``[alpha, beta]`` via its inverse CDF."""
    upper = alpha > 0
    # in the upper tail, sample the reflected interval [-beta, -alpha] instead
    lo = np.where(upper, -beta, alpha)
    hi = np.where(upper, -alpha, beta)
    plo, phi = ndtr(lo), ndtr(hi)
    p = plo + u * (phi - plo)
    tiny = np.finfo(np.float64).tiny
    z = norm_inv_cdf(np.clip(p, tiny, 1.0 - 2.0**-53))
    z = np.clip(z, lo, hi)
    return np.where(upper, -z, z)


def sample_conditional(g: Gmm, box: QueryBox, n: int, seed=None) -> np.ndarray:
    """``n`` draws from the mixture restricted to ``box``."""
    if box.d != g.d:
        raise ValueError(f"box has {box.d} dims, mixture has {g.d}")
    point = box.lo == box.hi
    if point.any():
        # zero-width dims condition on x_j = a_j: weight kernels by their density there
        wide = np.flatnonzero(box.constrained & ~point)
        pd = np.flatnonzero(point)
        z = (box.lo[pd] - g.means[:, pd]) / g.sd[:, pd]
        logm = np.log(g.weights) - 0.5 * np.sum(z * z, axis=1) - np.sum(np.log(g.sd[:, pd]), axis=1)
        if wide.size:
            with np.errstate(divide="ignore"):
                logm = logm + np.log(np.prod(dim_masses(g, box.lo, box.hi, wide), axis=1))
        top = logm.max()
        m = np.exp(logm - top) if np.isfinite(top) else np.zeros(g.N)
    else:
        m = g.weights * kernel_box_masses(g, box)
    total = m.sum()
    if not total > 0:
        raise ZeroMassError("box has zero mass under the mixture; use the Q = 0 answer")
    rng = np.random.default_rng(seed)
    comp = rng.choice(g.N, size=n, p=m / total)
    u = rng.random((n, g.d))
    mu, sd = g.means[comp], g.sd[comp]
    alpha = (box.lo - mu) / sd
    beta = (box.hi - mu) / sd
    x = mu + sd * _truncated_std(alpha, beta, u)
    x = np.clip(x, box.lo, box.hi)
    return np.where(box.lo == box.hi, box.lo, x)


def perturb_gmm(g: Gmm, sched: DiffusionSchedule, t: float) -> Gmm:
    """Mixture law of ``x / k(t) + sigma(t) z`` for ``x ~ g``."""
    k, s2 = float(sched.k(t)), float(sched.sigma2(t))
    sched._check(t)
    return Gmm(g.weights, g.means / k, g.variances / k**2 + s2)


@dataclass
class EmTrace:
    loglik: list
    resampled: list  # iteration indices whose M-step was followed by resampling


def _estep(g: Gmm, x, chunk=8192):
    n = len(x)
    resp_sum = np.zeros(g.N)
    sx = np.zeros((g.N, g.d))
    sxx = np.zeros((g.N, g.d))
    logq = np.empty(n)
    logw = np.log(np.maximum(g.weights, 1e-300))
    for lo in range(0, n, chunk):
        xc = x[lo:lo + chunk]
        lr = _log_kernels(g, xc)
        lr += logw
        mx = lr.max(axis=1, keepdims=True)
        lr -= mx
        r = np.exp(lr, out=lr)
        tot = r.sum(axis=1, keepdims=True)
        r /= tot
        logq[lo:lo + chunk] = (mx + np.log(tot))[:, 0]
        resp_sum += r.sum(axis=0)
        sx += r.T @ xc
        sxx += r.T @ (xc * xc)
    return resp_sum, sx, sxx, logq


def _em_single(x, N, iters, rng, var_floor, resample_var, resample_every):
    n, d = x.shape
    data_var = np.maximum(x.var(axis=0), var_floor)
    g = Gmm(np.full(N, 1.0 / N), x[rng.choice(n, size=N, replace=False)], np.tile(data_var, (N, 1)))
    trace = EmTrace([], [])
    w_min = 1.0 / (500 * N)
    for it in range(iters):
        resp_sum, sx, sxx, logq = _estep(g, x)
        trace.loglik.append(float(logq.mean()))
        nk = np.maximum(resp_sum, 1e-300)
        means = sx / nk[:, None]
        var = sxx / nk[:, None] - means**2
        dead = resp_sum < 1e-12
        means[dead] = g.means[dead]
        var[dead] = g.variances[dead]
        var = np.maximum(var, var_floor)
        w = resp_sum / resp_sum.sum()
        if resample_every and (it + 1) % resample_every == 0 and it + 1 < iters:
            low = np.flatnonzero(w < w_min)
            if low.size:
                p = np.exp(-(logq - logq.min()))  # proportional to 1 / q(x_i)
                pick = rng.choice(n, size=low.size, p=p / p.sum())
                means[low] = x[pick]
                var[low] = resample_var
                w[low] = w_min
                w = w / w.sum()
                trace.resampled.append(it)
        g = Gmm(w / w.sum(), means, var)
    _, _, _, logq = _estep(g, x)
    trace.loglik.append(float(logq.mean()))
    return g, trace


def em_fit(data, N: int = 256, iters: int = 200, seed=0, var_floor: float = VAR_FLOOR,
           resample_var: float = RESAMPLE_VAR, resample_every: int = RESAMPLE_EVERY,
           restarts: int = 1, return_trace: bool = False):
    """Fit a diagonal mixture by EM with periodic re-seeding of negligible kernels.

    ``trace.loglik[i]`` is the mean log-likelihood before iteration ``i``'s
    M-step; the last entry is after the final step.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.size == 0:
        raise ValueError("cannot fit a mixture to empty data")
    if N < 1:
        raise ValueError("N must be at least 1")
    if N > len(x):
        warnings.warn(f"N={N} exceeds the {len(x)} data rows; using N={len(x)}", stacklevel=2)
        N = len(x)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        g, trace = _em_single(x, N, iters, rng, var_floor, resample_var, resample_every)
        if best is None or trace.loglik[-1] > best[1].loglik[-1]:
            best = (g, trace)
    return best if return_trace else best[0]
