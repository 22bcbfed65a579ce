"""INI configuration for training and estimation.

Every key has a default; a config file only needs the keys it changes.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

SOURCES = ("csv", "forest_like", "modulo", "near_functional")


class ConfigError(ValueError):
    pass


@dataclass
class DataSettings:
    source: str = "forest_like"
    path: str = ""
    columns: str = ""  # comma-separated 0-based indices; empty = all
    missing: str = ""  # token:value pairs, e.g. "?:-1"
    delimiter: str = ","
    header: bool = True
    rows: int = 20000
    modulus: int = 2000
    noise_modulus: int = 200
    seed: int = 0
    dequantize: bool = True


@dataclass
class ScheduleSettings:
    scheme: str = "VP"
    T: float = 3.0
    epsilon: str = "auto"  # a number, or "auto" to probe the candidates
    T_trunc: float = 0.125
    epsilon_candidates: str = "0.0015625,0.003125,0.00625"
    epsilon_threshold: float = 1.0
    probe_steps: int = 300


@dataclass
class GmmSettings:
    components: int = 256
    iterations: int = 200
    var_floor: float = 1e-6
    resample_var: float = 0.05
    resample_every: int = 10
    restarts: int = 1
    max_rows: int = 50000


@dataclass
class BayesnetSettings:
    enabled: bool = True
    slices: int = 64
    bins: int = 64
    threshold: float = 0.05


@dataclass
class ScoreSettings:
    epochs: int = 30
    steps_per_epoch: int = 200
    batch_size: int = 256
    lr: float = 2e-3
    lr_final: float = 2e-4
    target: str = "denoising"
    exact_ref_size: int = 4096
    head_hidden: str = "96,96,96"
    tail_hidden: str = "48,48"
    seed: int = 0


@dataclass
class DensitySettings:
    """Pointwise log-density resolution; ``delta_head = 0`` means ``T_trunc / 16``."""

    k: int = 8
    delta_head: float = 0.0
    delta_tail: float = 0.01


@dataclass
class EstimateSettings:
    mode: str = "adc+"
    samples: int = 256
    k: int = 1
    delta_head: float = 0.03125
    delta_tail: float = 0.05
    histogram_bins: int = 1024


@dataclass
class TreeSettings:
    enabled: bool = True
    queries: int = 10000
    seed: int = 1


@dataclass
class OutputSettings:
    bundle: str = "model.bundle"
    seed: int = 0


@dataclass
class Settings:
    data: DataSettings = field(default_factory=DataSettings)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    gmm: GmmSettings = field(default_factory=GmmSettings)
    bayesnet: BayesnetSettings = field(default_factory=BayesnetSettings)
    score: ScoreSettings = field(default_factory=ScoreSettings)
    density: DensitySettings = field(default_factory=DensitySettings)
    estimate: EstimateSettings = field(default_factory=EstimateSettings)
    tree: TreeSettings = field(default_factory=TreeSettings)
    output: OutputSettings = field(default_factory=OutputSettings)

    def to_dict(self) -> dict:
        return {f.name: {g.name: getattr(getattr(self, f.name), g.name) for g in fields(getattr(self, f.name))}
                for f in fields(self)}


def _convert(raw: str, typ, where: str):
    try:
        if typ is bool or typ == "bool":
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def parse(text: str, source: str = "<config>") -> Settings:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    s = Settings()
    known = {f.name for f in fields(s)}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        obj = getattr(s, sec)
        # keys are case-insensitive (configparser lowercases them)
        byname = {f.name.lower(): f for f in fields(obj)}
        for key, raw in cp.items(sec):
            if key not in byname:
                raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]")
            f = byname[key]
            setattr(obj, f.name, _convert(raw, f.type, f"{source} [{sec}] {f.name}"))
    validate(s)
    return s


def load(path) -> Settings:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse(text, str(path))


def validate(s: Settings):
    if s.data.source not in SOURCES:
        raise ConfigError(f"[data] source must be one of {SOURCES}")
    if s.data.source == "csv" and not s.data.path:
        raise ConfigError("[data] source = csv needs a path")
    if s.schedule.epsilon != "auto":
        try:
            float(s.schedule.epsilon)
        except ValueError:
            raise ConfigError("[schedule] epsilon must be a number or 'auto'") from None
    if s.estimate.mode not in ("adc", "adc+", "gmm"):
        raise ConfigError("[estimate] mode must be adc, adc+ or gmm")
    if s.gmm.components < 1 or s.estimate.samples < 1:
        raise ConfigError("component and sample counts must be positive")


def int_list(text: str):
    return [int(v) for v in text.split(",") if v.strip()]


def float_list(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def missing_map(text: str) -> dict:
    out = {}
    for pair in filter(None, (p.strip() for p in text.split(","))):
        tok, _, val = pair.rpartition(":")
        if not tok:
            raise ConfigError(f"bad missing-value rule {pair!r}; expected token:value")
        out[tok] = float(val)
    return out
