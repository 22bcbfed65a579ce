"""Sobol points, torus shifts and the standard normal CDF / inverse CDF."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.special import ndtr

from .schedule import DomainError

MAX_DIM = 64
MAX_LOG2 = 16
_BITS = 32


@lru_cache(maxsize=1)
def _direction_table():
    text = resources.files("diffcard").joinpath("data/sobol_directions.txt").read_text()
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [int(v) for v in line.split()]
        rows.append((vals[0], vals[1], vals[2:]))
    return rows


@lru_cache(maxsize=MAX_DIM)
def _directions(dim_index: int) -> np.ndarray:
    """32 direction integers V_1..V_32 for one coordinate (0-based index)."""
    s, a, m = _direction_table()[dim_index]
    v = np.zeros(_BITS, dtype=np.uint64)
    if s == 0:
        for i in range(_BITS):
            v[i] = 1 << (_BITS - 1 - i)
        return v
    mm = list(m)
    for i in range(s, _BITS):
        # m_i = 2 a_1 m_{i-1} xor 4 a_2 m_{i-2} ... xor 2^s m_{i-s} xor m_{i-s}
        new = mm[i - s] ^ (mm[i - s] << s)
        for j in range(1, s):
            if (a >> (s - 1 - j)) & 1:
                new ^= mm[i - j] << j
        mm.append(new)
    for i in range(_BITS):
        v[i] = mm[i] << (_BITS - 1 - i)
    return v


@dataclass(frozen=True)
class SobolBlock:
    dim: int
    log2_len: int
    points: np.ndarray


def sobol(dim: int, k: int) -> SobolBlock:
    """First ``2**k`` unscrambled Sobol points in ``[0, 1)^dim`` (Gray-code order)."""
    if not 1 <= dim <= MAX_DIM:
        raise ValueError(f"dim must be in [1, {MAX_DIM}], got {dim}")
    if not 0 <= k <= MAX_LOG2:
        raise ValueError(f"k must be in [0, {MAX_LOG2}], got {k}")
    n = 1 << k
    idx = np.arange(n, dtype=np.uint64)
    gray = idx ^ (idx >> np.uint64(1))
    ints = np.zeros((n, dim), dtype=np.uint64)
    for j in range(dim):
        v = _directions(j)
        col = ints[:, j]
        for b in range(max(k, 1)):
            on = ((gray >> np.uint64(b)) & np.uint64(1)).astype(bool)
            col[on] ^= v[b]
    pts = ints.astype(np.float64) / float(1 << _BITS)
    pts.setflags(write=False)
    return SobolBlock(dim, k, pts)


def torus_shift(block: SobolBlock, y) -> SobolBlock:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (block.dim,):
        raise ValueError(f"shift must have shape ({block.dim},)")
    pts = np.mod(block.points + y, 1.0)
    pts[pts >= 1.0] = 0.0
    pts.setflags(write=False)
    return SobolBlock(block.dim, block.log2_len, pts)


def norm_cdf(x):
    return ndtr(x)


# Acklam's rational approximation, refined by one Halley step against ndtr.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def norm_inv_cdf(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(~(p > 0.0)) or np.any(~(p < 1.0)):
        raise DomainError("norm_inv_cdf requires 0 < p < 1")
    x = np.empty_like(p)
    lo = p < _P_LOW
    hi = p > 1.0 - _P_LOW
    mid = ~(lo | hi)

    q = p[mid] - 0.5
    r = q * q
    num = ((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    x[mid] = q * num / den

    for mask, sign, tail in ((lo, 1.0, p[lo]), (hi, -1.0, 1.0 - p[hi])):
        q = np.sqrt(-2.0 * np.log(tail))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        x[mask] = sign * num / den

    # Halley refinement; the residual is taken on the smaller tail to keep precision
    upper = x > 0
    e = np.where(upper, ndtr(-x) - (1.0 - p), ndtr(x) - p)
    e = np.where(upper, -e, e)
    u = e * np.sqrt(2 * np.pi) * np.exp(0.5 * x * x)
    x = x - u / (1.0 + 0.5 * x * u)
    return x if x.ndim else float(x)
