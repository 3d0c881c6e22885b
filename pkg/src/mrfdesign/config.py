"""Run configuration: a versioned YAML document with strict keys.

Every section is optional; omitted values fall back to the defaults, which
reproduce the standard IR-FISP design study (three tissues, 11-15 ms TRs,
10-60 degree flips with a free inversion pulse, 33 dB SNR). Example::

    schema_version: 1
    bloch: {te_ms: 2.0, nv: 400}
    design: {n: 200, delta_alpha_max_deg: 1.0}
    noise: {snr_db: 33.0, s_ref: 0.6}
    mc: {trials: 100, seed: 0}
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import yaml

from .bloch import DEFAULT_NV, DEFAULT_TE, FAST_NV, TissueParams
from .design import DEFAULT_TISSUES, DEFAULT_WEIGHTS, DesignConfig
from .dictionary import GridSpec

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed or invalid configuration document."""


def _canonical(obj):
    """Numbers as floats so that 700 and 700.0 hash alike."""
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (int, float)) and not isinstance(obj, bool):
        return float(obj)
    return obj


def _tissue_list(items) -> list:
    return [[t.t1, t.t2, t.m0] for t in items]


@dataclass
class BlochSection:
    te_ms: float = DEFAULT_TE
    nv: int = DEFAULT_NV
    beta_rule: str = "uniform"

    def validate(self):
        if not self.te_ms > 0:
            raise ConfigError("bloch.te_ms must be > 0")
        if int(self.nv) != self.nv or self.nv < 1:
            raise ConfigError("bloch.nv must be a positive integer")
        if self.beta_rule != "uniform":
            raise ConfigError("bloch.beta_rule: only 'uniform' is supported")


@dataclass
class DesignSection:
    tissues: list = field(default_factory=lambda: _tissue_list(DEFAULT_TISSUES))
    weights: list = field(default_factory=lambda: list(DEFAULT_WEIGHTS))
    n: int = 400
    tr_min_ms: float = 11.0
    tr_max_ms: float = 15.0
    alpha_min_deg: float = 10.0
    alpha_max_first_deg: float = 180.0
    alpha_max_rest_deg: float = 60.0
    delta_alpha_max_deg: float | None = 1.0
    nv_design: int = FAST_NV
    tol: float = 1e-4
    max_iter: int = 50_000
    init_seed: int = 0


@dataclass
class NoiseSection:
    snr_db: float = 33.0
    s_ref: float = 0.6
    sigma: float | None = None

    @property
    def resolved_sigma(self) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        return float(self.s_ref * 10.0 ** (-self.snr_db / 20.0))

    def validate(self):
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigError("noise.sigma must be > 0")
        if self.sigma is None and not self.s_ref > 0:
            raise ConfigError("noise.s_ref must be > 0")


@dataclass
class DictionarySection:
    t1_segments: list = field(default_factory=lambda: [list(s) for s in GridSpec().t1_segments])
    t2_segments: list = field(default_factory=lambda: [list(s) for s in GridSpec().t2_segments])


@dataclass
class McSection:
    trials: int = 100
    seed: int = 0
    tissue: list = field(default_factory=lambda: [700.0, 60.0, 0.6])

    def validate(self):
        if int(self.trials) != self.trials or self.trials < 2:
            raise ConfigError("mc.trials must be an integer >= 2")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError("mc.seed must be a nonnegative integer")


@dataclass
class SweepSection:
    lengths: list = field(default_factory=lambda: [300, 400, 500, 600, 700, 800])
    tissue: list = field(default_factory=lambda: [700.0, 60.0, 0.6])


@dataclass
class IoSection:
    out_dir: str = "out"


_SECTIONS = {
    "bloch": BlochSection,
    "design": DesignSection,
    "noise": NoiseSection,
    "dictionary": DictionarySection,
    "mc": McSection,
    "sweep": SweepSection,
    "io": IoSection,
}


@dataclass
class RunConfig:
    bloch: BlochSection = field(default_factory=BlochSection)
    design: DesignSection = field(default_factory=DesignSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    dictionary: DictionarySection = field(default_factory=DictionarySection)
    mc: McSection = field(default_factory=McSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    io: IoSection = field(default_factory=IoSection)

    def validate(self) -> "RunConfig":
        """Check everything up front so bad input never reaches a long computation."""
        try:
            for name in _SECTIONS:
                sec = getattr(self, name)
                if hasattr(sec, "validate"):
                    sec.validate()
            tissue_lists = [*self.design.tissues, self.mc.tissue, self.sweep.tissue]
            if any(not isinstance(t, (list, tuple)) or len(t) != 3 for t in tissue_lists):
                raise ConfigError("tissues are [t1_ms, t2_ms, m0] triples")
            self.design_config()
            self.grid_spec()
            self.mc_tissue()
            self.sweep_tissue()
            if not self.sweep.lengths or any(int(n) != n or n < 2 for n in self.sweep.lengths):
                raise ConfigError("sweep.lengths must be integers >= 2")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    def digest(self) -> str:
        """Stable hash of the fully resolved configuration."""
        blob = json.dumps(_canonical(self.to_dict()), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def design_config(self, mode: str | None = None) -> DesignConfig:
        d = self.design
        delta = d.delta_alpha_max_deg
        cfg = DesignConfig(
            tissues=tuple(TissueParams(*map(float, t)) for t in d.tissues),
            weights=tuple(d.weights),
            sigma=self.noise.resolved_sigma,
            n=int(d.n),
            tr_min=float(d.tr_min_ms),
            tr_max=float(d.tr_max_ms),
            alpha_min=math.radians(d.alpha_min_deg),
            alpha_max_first=math.radians(d.alpha_max_first_deg),
            alpha_max_rest=math.radians(d.alpha_max_rest_deg),
            delta_alpha_max=math.inf if delta is None else math.radians(delta),
            nv_design=int(d.nv_design),
            nv_report=int(self.bloch.nv),
            tol=float(d.tol),
            max_iter=int(d.max_iter),
        )
        return cfg.with_mode(mode) if mode else cfg

    def grid_spec(self) -> GridSpec:
        return GridSpec(tuple(map(tuple, self.dictionary.t1_segments)), tuple(map(tuple, self.dictionary.t2_segments)))

    def mc_tissue(self) -> TissueParams:
        return TissueParams(*map(float, self.mc.tissue))

    def sweep_tissue(self) -> TissueParams:
        return TissueParams(*map(float, self.sweep.tissue))


def from_dict(doc) -> RunConfig:
    """Build and validate a RunConfig, rejecting unknown keys at every level."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping")
    doc = dict(doc)
    version = doc.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        sub = doc.get(name)
        if sub is None:
            sub = {}
        if not isinstance(sub, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        allowed = {f.name for f in fields(cls)}
        bad = set(sub) - allowed
        if bad:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
        kwargs[name] = cls(**sub)
    return RunConfig(**kwargs).validate()


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(doc)
