"""Pipeline configuration: a TOML tree mapped onto the module dataclasses."""

from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .dsp import DspConfig
from .provenance import config_hash
from .source import SourceParams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SweepConfig:
    powers: tuple[float, ...] = (0.0, 5e-3, 10e-3, 15e-3, 20e-3)
    samples_per_point: int = 1_000_000
    # "pipeline" runs the full chain; "equivalent" samples the conditioned-domain model
    mode: str = "pipeline"
    power_uncertainty: float = 0.0
    block_size: int = 1 << 20

    def __post_init__(self):
        object.__setattr__(self, "powers", tuple(float(p) for p in self.powers))
        if self.mode not in ("pipeline", "equivalent"):
            raise ConfigError(f"sweep.mode must be 'pipeline' or 'equivalent', got {self.mode!r}")
        if self.samples_per_point < 2:
            raise ConfigError("sweep.samples_per_point must be >= 2")


@dataclass(frozen=True)
class ExtractorConfig:
    input_bits: int = 17600
    output_bits: int = 0  # 0: size from the leftover-hash bound
    epsilon: float = 1e-17
    seed_file: str = ""
    seed: int | None = None  # derive a reproducible seed; None means OS entropy


@dataclass(frozen=True)
class GenerateConfig:
    bytes: int = 1 << 20
    staleness_seconds: float = 86400.0
    block_size: int = 1 << 20
    capture: str = ""  # QRAW file to extract from instead of the simulator


@dataclass(frozen=True)
class AnalysisConfig:
    significance: float = 0.01
    sequence_length: int = 1_000_000


@dataclass(frozen=True)
class ReportConfig:
    powers: tuple[float, ...] = (0.475e-3, 2e-3, 5e-3, 10e-3, 15e-3, 20e-3)
    samples_per_point: int = 1_000_000
    mode: str = "equivalent"

    def __post_init__(self):
        object.__setattr__(self, "powers", tuple(float(p) for p in self.powers))


@dataclass(frozen=True)
class SpectrumConfig:
    samples: int = 1 << 22
    segment_length: int = 4096


@dataclass(frozen=True)
class PipelineConfig:
    source: SourceParams = field(default_factory=SourceParams)
    dsp: DspConfig = field(default_factory=DspConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    spectrum: SpectrumConfig = field(default_factory=SpectrumConfig)
    captures: dict = field(default_factory=dict)  # LO power (W) -> QRAW path, for calibration
    output_dir: str = "out"

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.to_dict() if hasattr(v, "to_dict") else (
                asdict(v) if hasattr(v, "__dataclass_fields__") else v)
        return d

    @property
    def hash(self) -> str:
        # where results go does not change them
        d = self.to_dict()
        d.pop("output_dir")
        return config_hash(d)

    def check_paths(self) -> None:
        for p in [self.extractor.seed_file, self.generate.capture, *self.captures.values()]:
            if p and not Path(p).exists():
                raise ConfigError(f"referenced path does not exist: {p}")


_SECTIONS = {
    "source": SourceParams,
    "dsp": DspConfig,
    "sweep": SweepConfig,
    "extractor": ExtractorConfig,
    "generate": GenerateConfig,
    "analysis": AnalysisConfig,
    "report": ReportConfig,
    "spectrum": SpectrumConfig,
}


def _build(cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{cls.__name__}]: {sorted(unknown)}")
    try:
        if cls is SourceParams:
            return SourceParams.from_dict(values)
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def from_dict(tree: dict[str, Any], base_dir: str | os.PathLike = ".") -> PipelineConfig:
    tree = dict(tree)
    kw = {}
    for name, cls in _SECTIONS.items():
        if name in tree:
            section = tree.pop(name)
            if not isinstance(section, dict):
                raise ConfigError(f"[{name}] must be a table")
            kw[name] = _build(cls, section)
    base = Path(base_dir)

    def rel(p: str) -> str:
        return str(base / p) if p and not os.path.isabs(p) else p

    if "captures" in tree:
        kw["captures"] = {float(k): rel(v) for k, v in tree.pop("captures").items()}
    if "output_dir" in tree:
        kw["output_dir"] = tree.pop("output_dir")
    if tree:
        raise ConfigError(f"unknown top-level keys: {sorted(tree)}")
    cfg = PipelineConfig(**kw)
    if cfg.extractor.seed_file:
        cfg = replace(cfg, extractor=replace(cfg.extractor, seed_file=rel(cfg.extractor.seed_file)))
    if cfg.generate.capture:
        cfg = replace(cfg, generate=replace(cfg.generate, capture=rel(cfg.generate.capture)))
    return cfg


def load(path: str | os.PathLike | None) -> PipelineConfig:
    """Read a TOML config; ``None`` gives the defaults."""
    if path is None:
        return PipelineConfig()
    with open(path, "rb") as fh:
        try:
            tree = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(tree, Path(path).parent)
