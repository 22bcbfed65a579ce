"""Forward perturbation schemes and the exact score of a perturbed point cloud.

Two schemes are supported:

* ``VP``: alpha = 1, beta = sqrt(2), so k(t) = e^t and sigma^2(t) = 1 - e^{-2t}
* ``VE``: alpha = 0, beta = 1, so k(t) = 1 and sigma^2(t) = t

A point x0 perturbed for time t is distributed as N(x0 / k(t), sigma^2(t) I).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

VP = "VP"
VE = "VE"

# kernels whose log-responsibility is this far below the max are dropped
_PRUNE_LOG = -40.0


class DomainError(ValueError):
    """Raised when a time or probability falls outside an operation's domain."""


@dataclass(frozen=True)
class DiffusionSchedule:
    scheme: str = VP
    T: float = 3.0
    epsilon: float = 1.0 / 640
    T_trunc: float = 1.0 / 8

    def __post_init__(self):
        if self.scheme not in (VP, VE):
            raise ValueError(f"unsupported scheme {self.scheme!r}; only VP and VE are implemented")
        if not 0.0 < self.epsilon < self.T_trunc < self.T:
            raise ValueError(
                f"need 0 < epsilon < T_trunc < T, got {self.epsilon}, {self.T_trunc}, {self.T}"
            )

    @property
    def alpha(self) -> float:
        return 1.0 if self.scheme == VP else 0.0

    @property
    def beta2(self) -> float:
        return 2.0 if self.scheme == VP else 1.0

    def _check(self, t, lo_open=False, upper=None):
        t = np.asarray(t, dtype=np.float64)
        upper = self.T if upper is None else upper
        bad = (t <= 0.0) if lo_open else (t < 0.0)
        if np.any(bad) or np.any(t > upper) or not np.all(np.isfinite(t)):
            raise DomainError(f"time {t} outside {'(0' if lo_open else '[0'}, {upper}]")
        return t

    def k(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.exp(t) if self.scheme == VP else np.ones_like(t)

    def sigma2(self, t):
        t = np.asarray(t, dtype=np.float64)
        return -np.expm1(-2.0 * t) if self.scheme == VP else t.copy()

    def sigma(self, t):
        return np.sqrt(self.sigma2(t))

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "T": self.T, "epsilon": self.epsilon, "T_trunc": self.T_trunc}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        return cls(d["scheme"], float(d["T"]), float(d["epsilon"]), float(d["T_trunc"]))


def coeffs(sched: DiffusionSchedule, t, upper=None):
    """Return ``(k(t), sigma^2(t))``; ``t`` must lie in ``[0, T]``."""
    t = sched._check(t, upper=upper)
    k, s2 = sched.k(t), sched.sigma2(t)
    if k.ndim == 0:
        return float(k), float(s2)
    return k, s2


def perturb(sched: DiffusionSchedule, t, x0, noise, upper=None):
    """Map clean points to time ``t``: ``x0 / k(t) + sigma(t) * noise``."""
    k, s2 = coeffs(sched, t, upper=upper)
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    k = np.asarray(k)[..., None] if np.ndim(k) else k
    s = np.sqrt(np.asarray(s2))[..., None] if np.ndim(s2) else np.sqrt(s2)
    return x0 / k + s * noise


class PointCloud:
    """Immutable set of d-dimensional points in normalized units."""

    def __init__(self, points):
        pts = np.array(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("point cloud must be a nonempty (n, d) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        self.points = pts
        self._sq = np.einsum("ij,ij->i", pts, pts)
        self._sq.setflags(write=False)

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


def _as_cloud(cloud) -> PointCloud:
    return cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)


def mixture_log_density(sched: DiffusionSchedule, cloud, t, x, upper=None):
    """log of (1/N) sum_i N(x; x_i / k(t), sigma^2(t) I) at each row of ``x``."""
    cloud = _as_cloud(cloud)
    t = sched._check(t, lo_open=True, upper=upper)
    k, s2 = float(sched.k(t)), float(sched.sigma2(t))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d2 = _sq_dists(x, cloud, k)
    logk = -0.5 * d2 / s2
    return logsumexp(logk, axis=1) - np.log(len(cloud)) - 0.5 * cloud.d * np.log(2 * np.pi * s2)


def _sq_dists(x, cloud: PointCloud, k: float):
    centers_sq = cloud._sq / k**2
    xx = np.einsum("ij,ij->i", x, x)
    d2 = xx[:, None] - 2.0 * (x @ cloud.points.T) / k + centers_sq[None, :]
    return np.maximum(d2, 0.0)


def mixture_score(sched: DiffusionSchedule, cloud, t, x, upper=None, chunk: int = 4096):
    """Exact gradient of the log perturbed-cloud density at ``x``.

    ``x`` may be a single point or an ``(m, d)`` batch.  ``t`` must be a scalar
    in ``(0, T]``; the score of a delta mixture at ``t = 0`` does not exist.
    """
    cloud = _as_cloud(cloud)
    t = sched._check(t, lo_open=True, upper=upper)
    k, s2 = float(sched.k(t)), float(sched.sigma2(t))
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[1] != cloud.d:
        raise ValueError(f"point has dimension {xb.shape[1]}, cloud has {cloud.d}")
    out = np.empty_like(xb)
    for lo in range(0, len(xb), chunk):
        xs = xb[lo:lo + chunk]
        logr = -0.5 * _sq_dists(xs, cloud, k) / s2
        logr -= logr.max(axis=1, keepdims=True)
        r = np.where(logr > _PRUNE_LOG, np.exp(logr), 0.0)
        r /= r.sum(axis=1, keepdims=True)
        out[lo:lo + chunk] = (r @ cloud.points / k - xs) / s2
    return out[0] if single else out
