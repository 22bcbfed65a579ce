"""The trained estimator and its on-disk container.

Layout (see ``docs/FORMATS.md``)::

    b"DIFFCARD" | version byte | b"\\n" | JSON header | b"\\n" | parameter blocks

Block offsets in the header are relative to the first byte after the header
line.  All blocks are little-endian; network weights are float32, everything
else float64.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .bayesnet import CondHistogram, attach_cache
from .density import DensityConfig, TimestepScheme
from .gmm import Gmm, perturb_gmm
from .mlp import Mlp
from .schedule import DiffusionSchedule
from .score import ScoreModel
from .tree import DecisionTree
from .workload import NormalizationMeta

MAGIC = b"DIFFCARD"
FORMAT_VERSION = 1
HIST_BINS = 1024


class IncompatibleBundle(ValueError):
    """The file is not a bundle this version can read."""


@dataclass(frozen=True)
class Histograms1d:
    """Equi-width per-attribute histograms in normalized units."""

    edges: np.ndarray  # (d, B + 1)
    mass: np.ndarray  # (d, B), rows sum to 1

    @classmethod
    def fit(cls, points, bins: int = HIST_BINS) -> "Histograms1d":
        x = np.asarray(points, dtype=np.float64)
        d = x.shape[1]
        edges = np.empty((d, bins + 1))
        mass = np.empty((d, bins))
        for j in range(d):
            lo, hi = x[:, j].min(), x[:, j].max()
            edges[j] = np.linspace(lo, hi if hi > lo else lo + 1e-9, bins + 1)
            idx = np.clip(np.searchsorted(edges[j], x[:, j], side="right") - 1, 0, bins - 1)
            mass[j] = np.bincount(idx, minlength=bins) / len(x)
        return cls(edges, mass)

    def mass_between(self, j: int, lo: float, hi: float) -> float:
        e = self.edges[j]
        a, b = np.clip(lo, e[0], e[-1]), np.clip(hi, e[0], e[-1])
        overlap = np.clip(np.minimum(e[1:], b) - np.maximum(e[:-1], a), 0.0, None)
        return float(np.clip(self.mass[j] @ (overlap / np.diff(e)), 0.0, 1.0))


@dataclass
class EstimatorBundle:
    meta: NormalizationMeta
    sched: DiffusionSchedule
    model: ScoreModel
    gmm: Gmm
    hists: Histograms1d
    rows: int
    seed: int = 0
    n_samples: int = 256
    density: DensityConfig = field(default_factory=DensityConfig)
    cond: CondHistogram | None = None
    tree: DecisionTree | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.meta.d

    @property
    def excluded(self):
        return None if self.cond is None else self.cond.child

    @cached_property
    def gmm_eps(self) -> Gmm:
        return perturb_gmm(self.gmm, self.sched, self.sched.epsilon)

    @cached_property
    def scheme(self) -> TimestepScheme:
        return self.density.scheme(self.sched)

    @cached_property
    def norm_span(self) -> np.ndarray:
        return self.meta.norm_max - self.meta.norm_min


def dataset_hash(table) -> str:
    return hashlib.sha256(np.ascontiguousarray(table, dtype="<f8").tobytes()).hexdigest()


def _blocks(b: EstimatorBundle):
    out = [
        ("head", b.model.head.to_blob(), "<f4", [b.model.head.n_params]),
        ("tail", b.model.tail.to_blob(), "<f4", [b.model.tail.n_params]),
        ("gmm_weights", b.gmm.weights, "<f8", None),
        ("gmm_means", b.gmm.means, "<f8", None),
        ("gmm_variances", b.gmm.variances, "<f8", None),
        ("hist_edges", b.hists.edges, "<f8", None),
        ("hist_mass", b.hists.mass, "<f8", None),
    ]
    if b.cond is not None:
        out += [
            ("cond_parent_edges", b.cond.parent_edges, "<f8", None),
            ("cond_child_edges", b.cond.child_edges, "<f8", None),
            ("cond_table", b.cond.table, "<f8", None),
        ]
    if b.tree is not None:
        out.append(("tree", b.tree.to_array(), "<f8", None))
    res = []
    for name, arr, dt, shape in out:
        if isinstance(arr, bytes):
            res.append((name, arr, dt, shape))
        else:
            a = np.ascontiguousarray(arr, dtype=dt)
            res.append((name, a.tobytes(), dt, list(a.shape)))
    return res


def to_bytes(b: EstimatorBundle, created: str | None = None) -> bytes:
    blocks = _blocks(b)
    index, pos = [], 0
    for name, raw, dt, shape in blocks:
        index.append({"name": name, "offset": pos, "nbytes": len(raw), "dtype": dt, "shape": shape})
        pos += len(raw)
    header = {
        "format": "diffcard-bundle",
        "version": FORMAT_VERSION,
        "created": created if created is not None else time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "schedule": b.sched.to_dict(),
        "normalization": b.meta.to_dict(),
        "model": {
            "d": b.model.d,
            "head_widths": b.model.head.widths,
            "head_activations": b.model.head.activations,
            "tail_widths": b.model.tail.widths,
            "tail_activations": b.model.tail.activations,
            "head_modules": list(b.model.head_modules),
        },
        "rows": int(b.rows),
        "seed": int(b.seed),
        "n_samples": int(b.n_samples),
        "density": asdict(b.density),
        "cond": None if b.cond is None else {"parent": b.cond.parent, "child": b.cond.child},
        "provenance": b.provenance,
        "blocks": index,
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + bytes([FORMAT_VERSION]) + b"\n" + line + b"\n" + b"".join(raw for _, raw, _, _ in blocks)


def save(b: EstimatorBundle, path, created: str | None = None) -> dict:
    """Write the bundle; returns a size breakdown in bytes per component."""
    data = to_bytes(b, created)
    with open(path, "wb") as f:
        f.write(data)
    return size_breakdown(data)


def _split(data: bytes):
    if len(data) < len(MAGIC) + 2 or data[:len(MAGIC)] != MAGIC:
        raise IncompatibleBundle("not a diffcard bundle (bad magic)")
    ver = data[len(MAGIC)]
    if ver != FORMAT_VERSION:
        raise IncompatibleBundle(f"bundle format version {ver} is not supported (expected {FORMAT_VERSION})")
    start = len(MAGIC) + 2
    end = data.find(b"\n", start)
    if end < 0:
        raise IncompatibleBundle("truncated bundle header")
    try:
        header = json.loads(data[start:end])
    except ValueError as e:
        raise IncompatibleBundle(f"corrupt bundle header: {e}") from None
    if header.get("version") != FORMAT_VERSION:
        raise IncompatibleBundle(f"header version {header.get('version')} is not supported")
    return header, data[end + 1:]


def size_breakdown(data: bytes) -> dict:
    header, body = _split(data)
    sizes = {"header": len(data) - len(body)}
    for blk in header["blocks"]:
        key = blk["name"].split("_")[0]
        sizes[key] = sizes.get(key, 0) + blk["nbytes"]
    sizes["total"] = len(data)
    return sizes


def from_bytes(data: bytes) -> EstimatorBundle:
    header, body = _split(data)
    arrays = {}
    for blk in header["blocks"]:
        lo, n = blk["offset"], blk["nbytes"]
        if lo + n > len(body):
            raise IncompatibleBundle(f"block {blk['name']} runs past the end of the file")
        raw = body[lo:lo + n]
        if blk["dtype"] == "<f4" and blk["name"] in ("head", "tail"):
            arrays[blk["name"]] = raw
        else:
            arrays[blk["name"]] = np.frombuffer(raw, dtype=blk["dtype"]).reshape(blk["shape"]).astype(np.float64)
    try:
        sched = DiffusionSchedule.from_dict(header["schedule"])
        m = header["model"]
        head = Mlp.from_blob(arrays["head"], m["head_widths"], m["head_activations"])
        tail = Mlp.from_blob(arrays["tail"], m["tail_widths"], m["tail_activations"])
        model = ScoreModel(sched, m["d"], head, tail, head_modules=m["head_modules"])
        gmm = Gmm(arrays["gmm_weights"], arrays["gmm_means"], arrays["gmm_variances"])
        hists = Histograms1d(arrays["hist_edges"], arrays["hist_mass"])
        cond = None
        if header["cond"] is not None:
            cond = CondHistogram(header["cond"]["parent"], header["cond"]["child"], arrays["cond_parent_edges"],
                                 arrays["cond_child_edges"], arrays["cond_table"])
            cond = attach_cache(cond, gmm)  # derived from the mixture, so not stored
        tree = DecisionTree.from_array(arrays["tree"]) if "tree" in arrays else None
        return EstimatorBundle(
            NormalizationMeta.from_dict(header["normalization"]), sched, model, gmm, hists, header["rows"],
            header["seed"], header["n_samples"], DensityConfig(**header["density"]), cond, tree,
            header["provenance"],
        )
    except (KeyError, ValueError, TypeError) as e:
        raise IncompatibleBundle(f"bundle contents do not match header: {e}") from None


def load(path) -> EstimatorBundle:
    with open(path, "rb") as f:
        return from_bytes(f.read())


def read_header(path) -> dict:
    with open(path, "rb") as f:
        data = f.read()
    header, _ = _split(data)
    header["sizes"] = size_breakdown(data)
    return header
