"""Tables, normalization, synthetic generators, range workloads and Q-error reporting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .gmm import QueryBox
from .schedule import PointCloud

NORM_RANGE = 3.2
SPLITS = ("train", "validate", "test")


class DataError(ValueError):
    """Unreadable or inconsistent input data."""


# -- ingestion ---------------------------------------------------------------

def ingest_csv(path, columns=None, missing=None, delimiter=",", header=True):
    """Read selected numeric columns of a delimited file.

    ``columns`` holds 0-based indices (order preserved).  ``missing`` maps
    unparseable tokens such as ``"?"`` to a number; without it they raise.
    Returns ``(table, names)``.
    """
    rows, names = [], None
    missing = {} if missing is None else dict(missing)
    with open(path, newline="") as f:
        reader = csv.reader(f, delimiter=delimiter)
        for r, rec in enumerate(reader):
            if r == 0 and header:
                names = [c.strip() for c in rec]
                continue
            if not rec or all(not c.strip() for c in rec):
                continue
            cols = range(len(rec)) if columns is None else columns
            vals = []
            for c in cols:
                if c >= len(rec):
                    raise DataError(f"{path}: row {r + 1} has no column {c}")
                tok = rec[c].strip()
                try:
                    vals.append(float(tok))
                except ValueError:
                    if tok in missing:
                        vals.append(float(missing[tok]))
                    else:
                        raise DataError(f"{path}: row {r + 1}, column {c}: cannot parse {tok!r}") from None
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    widths = {len(v) for v in rows}
    if len(widths) != 1:
        raise DataError(f"{path}: ragged rows")
    table = np.array(rows, dtype=np.float64)
    if names is not None and columns is not None:
        names = [names[c] if c < len(names) else f"col{c}" for c in columns]
    if names is None:
        names = [f"col{c}" for c in (columns if columns is not None else range(table.shape[1]))]
    return table, names


# -- normalization -------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationMeta:
    raw_min: np.ndarray
    raw_max: np.ndarray
    scale: np.ndarray
    offset: np.ndarray
    integer: np.ndarray  # column holds only whole numbers
    constant: np.ndarray

    @property
    def d(self) -> int:
        return len(self.scale)

    def apply(self, table):
        return (np.asarray(table, dtype=np.float64) - self.raw_min) * self.scale - self.offset

    def invert(self, norm):
        return (np.asarray(norm, dtype=np.float64) + self.offset) / self.scale + self.raw_min

    @property
    def norm_min(self):
        return self.apply(self.raw_min)

    @property
    def norm_max(self):
        return self.apply(self.raw_max)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("raw_min", "raw_max", "scale", "offset", "integer", "constant")}

    @classmethod
    def from_dict(cls, d) -> "NormalizationMeta":
        f = lambda k, t=np.float64: np.asarray(d[k], dtype=t)
        return cls(f("raw_min"), f("raw_max"), f("scale"), f("offset"), f("integer", bool), f("constant", bool))

    def box(self, lo, hi) -> QueryBox | None:
        """Normalized box for raw closed bounds; ``None`` if it holds no representable value.

        Bounds at or past the data extremes become unbounded, and bounds on
        whole-number columns snap outward to the surrounding half-integers.
        """
        lo = np.array(lo, dtype=np.float64)
        hi = np.array(hi, dtype=np.float64)
        if np.any(lo > hi):
            return None
        with np.errstate(invalid="ignore"):
            # a whole-number column with no integer inside [lo, hi] empties the box
            if np.any(self.integer & (np.ceil(lo) > np.floor(hi))):
                return None
            lo = np.where(self.integer & np.isfinite(lo), np.ceil(lo) - 0.5, lo)
            hi = np.where(self.integer & np.isfinite(hi), np.floor(hi) + 0.5, hi)
        nlo = np.where(lo <= self.raw_min, -np.inf, self.apply(lo))
        nhi = np.where(hi >= self.raw_max, np.inf, self.apply(hi))
        return QueryBox(nlo, nhi)


def normalize(table):
    """Scale each column to range 3.2, then center it.  Returns ``(PointCloud, meta)``."""
    x = np.asarray(table, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise DataError("table must be a nonempty 2-d array")
    if not np.all(np.isfinite(x)):
        raise DataError("table contains non-finite values")
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = hi - lo
    constant = span == 0
    scale = np.where(constant, 1.0, NORM_RANGE / np.where(constant, 1.0, span))
    z = (x - lo) * scale
    offset = z.mean(axis=0)
    meta = NormalizationMeta(lo, hi, scale, offset, np.all(x == np.round(x), axis=0), constant)
    return PointCloud(z - offset), meta


def dequantize(table, meta: NormalizationMeta, seed=0):
    """Spread whole-number columns uniformly over their unit cells, in raw units."""
    x = np.array(table, dtype=np.float64)
    rng = np.random.default_rng(seed)
    cols = np.flatnonzero(meta.integer & ~meta.constant)
    x[:, cols] += rng.random((len(x), len(cols))) - 0.5
    return x


# -- generators ----------------------------------------------------------------

def gen_modulo(rows: int, M: int = 2000, m: int = 200, seed=0) -> np.ndarray:
    """Columns A, B, C = (A + B + e1) mod M, D, E = (A + D + e2) mod M."""
    if rows < 1 or not 1 <= m <= M:
        raise ValueError("need rows >= 1 and 1 <= m <= M")
    rng = np.random.default_rng(seed)
    a, b, d = (rng.integers(0, M, rows) for _ in range(3))
    e1, e2 = rng.integers(0, m, rows), rng.integers(0, m, rows)
    return np.stack([a, b, (a + b + e1) % M, d, (a + d + e2) % M], axis=1).astype(np.float64)


FOREST_LIKE_NAMES = (
    "elevation", "aspect", "slope", "h_dist_hydro", "v_dist_hydro",
    "h_dist_road", "hillshade_9am", "hillshade_noon", "hillshade_3pm", "h_dist_fire",
)


def gen_forest_like(rows: int, seed=0) -> np.ndarray:
    """Ten whole-number terrain attributes with skewed marginals and nonlinear couplings."""
    rng = np.random.default_rng(seed)
    zone = rng.choice(3, size=rows, p=[0.45, 0.4, 0.15])
    elev = rng.normal(np.array([2950.0, 2650.0, 3300.0])[zone], np.array([140.0, 180.0, 90.0])[zone])
    aspect = np.mod(np.where(rng.random(rows) < 0.6, rng.normal(90, 60, rows), rng.uniform(0, 360, rows)), 360)
    slope = np.clip(rng.gamma(3.0, 4.5, rows) * np.where(zone == 2, 1.3, 1.0), 0, 66)
    hh = rng.gamma(1.3, 200.0, rows) * (1 + 0.3 * (elev - 2800) / 400).clip(0.3)
    vh = hh * np.tan(np.radians(slope)) * rng.uniform(0.2, 0.9, rows) + rng.normal(0, 15, rows)
    road = rng.gamma(1.6, 1000.0, rows) * np.exp((elev - 2900) / 900)
    fire = 0.5 * road + rng.gamma(1.5, 800.0, rows)
    az, sl = np.radians(aspect), np.radians(slope)

    def shade(sun_az, sun_alt):
        za, sa = np.radians(90 - sun_alt), np.radians(sun_az)
        v = np.cos(za) * np.cos(sl) + np.sin(za) * np.sin(sl) * np.cos(sa - az)
        return np.clip(255 * np.clip(v, 0, 1) + rng.normal(0, 4, rows), 0, 254)

    cols = [
        np.clip(elev, 1859, 3858), aspect, slope, np.clip(hh, 0, 1397), np.clip(vh, -173, 601),
        np.clip(road, 0, 7117), shade(110, 45), shade(180, 65), shade(250, 45), np.clip(fire, 0, 7173),
    ]
    return np.round(np.stack(cols, axis=1))


def gen_near_functional(rows: int, noise: float = 0.01, seed=0) -> np.ndarray:
    """Four attributes; column 1 is column 0 plus small noise (relative to its range)."""
    rng = np.random.default_rng(seed)
    a = np.where(rng.random(rows) < 0.5, rng.normal(-0.5, 0.3, rows), rng.normal(0.6, 0.5, rows))
    b = a + noise * (a.max() - a.min()) * rng.standard_normal(rows)
    c = 0.5 * a + rng.normal(0, 0.4, rows)
    e = rng.gamma(2.0, 0.5, rows)
    return np.stack([a, b, c, e], axis=1)


def gen_toy2d(rows: int = 2000, seed=0) -> np.ndarray:
    """Two-dimensional toy set mixing supports of different dimension.

    A filled square (score O(1) inside, O(1/sigma) at its edges), a line
    segment and five atoms (both O(1/sigma^2) off the support).
    """
    rng = np.random.default_rng(seed)
    part = rng.choice(3, size=rows, p=[0.4, 0.3, 0.3])
    out = np.empty((rows, 2))
    sq = part == 0
    out[sq] = rng.uniform([-1.5, -1.0], [-0.3, 1.0], (sq.sum(), 2))
    seg = part == 1
    out[seg] = np.column_stack([rng.uniform(0.2, 1.4, seg.sum()), np.full(seg.sum(), 0.6)])
    atoms = np.array([[0.3, -0.2], [0.7, -0.5], [1.1, -0.2], [0.5, -0.9], [1.3, -0.8]])
    at = part == 2
    out[at] = atoms[rng.integers(0, len(atoms), at.sum())]
    return out


# -- workloads -------------------------------------------------------------------

@dataclass
class Workload:
    """Raw-unit query boxes; unconstrained sides are infinite."""

    lo: np.ndarray  # (Q, d)
    hi: np.ndarray
    cards: np.ndarray  # (Q,), NaN when unknown
    split: np.ndarray  # (Q,) strings
    ids: np.ndarray = None
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.lo))

    def __len__(self):
        return len(self.lo)

    @property
    def d(self) -> int:
        return self.lo.shape[1]

    @property
    def constrained(self) -> np.ndarray:
        return np.isfinite(self.lo) | np.isfinite(self.hi)

    def subset(self, mask) -> "Workload":
        mask = np.asarray(mask)
        return Workload(self.lo[mask], self.hi[mask], self.cards[mask], self.split[mask], self.ids[mask])

    def of_split(self, name: str) -> "Workload":
        return self.subset(self.split == name)


def gen_workload(table, count: int, seed=0, fractions=(0.8, 0.1, 0.1)) -> Workload:
    """Random range queries in raw units; cardinalities are left unlabelled."""
    x = np.asarray(table, dtype=np.float64)
    n, d = x.shape
    if n == 0:
        raise DataError("cannot generate queries over an empty table")
    rng = np.random.default_rng(seed)
    mn, mx = x.min(axis=0), x.max(axis=0)
    R = mx - mn
    lo = np.full((count, d), -np.inf)
    hi = np.full((count, d), np.inf)
    n_exp = n_width = 0
    for q in range(count):
        k = int(rng.integers(1, d + 1))
        attrs = rng.choice(d, size=k, replace=False)
        if rng.random() < 0.9:
            center = x[rng.integers(n), attrs]
        else:
            center = rng.uniform(mn[attrs], mx[attrs])
        use_exp = rng.random(k) >= 0.5
        width = np.where(use_exp, rng.exponential(R[attrs] / 10), rng.uniform(0, R[attrs]))
        n_exp += int(use_exp.sum())
        n_width += k
        lo[q, attrs] = np.clip(center - width / 2, mn[attrs], mx[attrs])
        hi[q, attrs] = np.clip(center + width / 2, mn[attrs], mx[attrs])
    fr = np.asarray(fractions, dtype=np.float64)
    fr = fr / fr.sum()
    counts = np.floor(fr * count).astype(int)
    counts[-1] = count - counts[:-1].sum()
    split = np.repeat(np.array(SPLITS), counts)[rng.permutation(count)]
    return Workload(lo, hi, np.full(count, np.nan), split,
                    stats={"exponential_widths": n_exp, "widths": n_width})


def oracle_cardinality(table, lo, hi) -> int:
    x = np.asarray(table)
    return int(np.count_nonzero(np.all((x >= lo) & (x <= hi), axis=1)))


def label_workload(table, wl: Workload) -> Workload:
    x = np.asarray(table)
    cards = np.empty(len(wl))
    for q in range(len(wl)):
        cols = np.flatnonzero(wl.constrained[q])
        sub = x[:, cols]
        cards[q] = np.count_nonzero(np.all((sub >= wl.lo[q, cols]) & (sub <= wl.hi[q, cols]), axis=1))
    wl.cards = cards
    return wl


def write_workload(path, wl: Workload):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "predicates", "count", "split"])
        for q in range(len(wl)):
            preds = ",".join(f"{j}:{float(wl.lo[q, j])!r}:{float(wl.hi[q, j])!r}"
                             for j in np.flatnonzero(wl.constrained[q]))
            c = wl.cards[q]
            w.writerow([int(wl.ids[q]), preds, "" if np.isnan(c) else int(c), wl.split[q]])


def read_workload(path, d: int) -> Workload:
    ids, los, his, cards, split = [], [], [], [], []
    with open(path, newline="") as f:
        r = csv.reader(f, delimiter="\t")
        head = next(r, None)
        if head is None or head[:2] != ["id", "predicates"]:
            raise DataError(f"{path}: not a workload file")
        for ln, rec in enumerate(r, start=2):
            lo, hi = np.full(d, -np.inf), np.full(d, np.inf)
            try:
                for p in filter(None, rec[1].split(",")):
                    j, a, b = p.split(":")
                    j = int(j)
                    if not 0 <= j < d:
                        raise DataError(f"{path}:{ln}: attribute {j} outside 0..{d - 1}")
                    lo[j], hi[j] = float(a), float(b)
                ids.append(int(rec[0]))
                cards.append(float(rec[2]) if len(rec) > 2 and rec[2] != "" else np.nan)
            except (ValueError, IndexError) as e:
                raise DataError(f"{path}:{ln}: {e}") from None
            split.append(rec[3] if len(rec) > 3 else "test")
            los.append(lo)
            his.append(hi)
    return Workload(np.array(los).reshape(-1, d), np.array(his).reshape(-1, d), np.array(cards),
                    np.array(split), np.array(ids, dtype=np.int64))


def workload_dim(path) -> int:
    """Largest attribute index mentioned in a workload file, plus one."""
    top = -1
    with open(path, newline="") as f:
        r = csv.reader(f, delimiter="\t")
        next(r, None)
        for rec in r:
            for p in filter(None, rec[1].split(",")):
                top = max(top, int(p.split(":")[0]))
    return top + 1


# -- error metrics ---------------------------------------------------------------

def q_error(card_real, card_est):
    r = np.maximum(np.asarray(card_real, dtype=np.float64), 0.0)
    e = np.maximum(np.asarray(card_est, dtype=np.float64), 0.0)
    r = np.where(r == 0, 1.0, r)
    e = np.where(e == 0, 1.0, e)
    out = np.maximum(r / e, e / r)
    return float(out) if out.ndim == 0 else out


def nearest_rank(values, pct: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        return float("nan")
    k = max(1, math.ceil(pct / 100.0 * v.size))
    return float(v[k - 1])


@dataclass(frozen=True)
class Summary:
    n: int
    gm: float
    p50: float
    p95: float
    p99: float
    max: float
    mean_latency_ms: float = float("nan")
    model_bytes: int = 0

    def row(self) -> list:
        return [self.n, self.gm, self.p50, self.p95, self.p99, self.max, self.mean_latency_ms, self.model_bytes]


SUMMARY_HEADER = ["n", "gm", "p50", "p95", "p99", "max", "mean_latency_ms", "model_bytes"]


def report(qerrors, latencies_ms=None, model_bytes: int = 0) -> Summary:
    q = np.asarray(qerrors, dtype=np.float64)
    lat = float(np.mean(latencies_ms)) if latencies_ms is not None and len(latencies_ms) else float("nan")
    return Summary(int(q.size), float(np.exp(np.mean(np.log(q)))), nearest_rank(q, 50), nearest_rank(q, 95),
                   nearest_rank(q, 99), float(q.max()), lat, int(model_bytes))


def format_summary(rows: dict) -> str:
    """Aligned text table; ``rows`` maps a label to a :class:`Summary`."""
    head = ["mode"] + SUMMARY_HEADER
    body = [[k] + [f"{v:.4g}" if isinstance(v, float) else str(v) for v in s.row()] for k, s in rows.items()]
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))
    return "\n".join([fmt(head)] + [fmt(r) for r in body])
