"""Run configuration: dataclass sections, YAML presets and a content hash."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import yaml

from .mobility import MobilityTrainConfig
from .score import NoiseSchedule, ScoreTrainConfig
from .sde import Affine2dParams, CirParams, DataConfig, OuParams

KINDS = ("cir-analytic", "cir-mc", "affine2d", "ou-oracle", "custom-data")


class ConfigError(ValueError):
    pass


@dataclass
class ScoreSection:
    sigma_min: float = 0.05
    sigma_max: float = 0.05
    law: str = "log-uniform"
    weight: str = "sigma2"
    stationary: ScoreTrainConfig = field(default_factory=lambda: ScoreTrainConfig(widths=(128, 64)))
    joint: ScoreTrainConfig = field(default_factory=lambda: ScoreTrainConfig(widths=(256, 128)))

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.sigma_min, self.sigma_max, self.law, self.weight)


@dataclass
class LagSection:
    step: float = 0.05
    n: int = 20
    bc_type: str = "not-a-knot"
    center: bool = False


@dataclass
class LibrarySection:
    kind: str = "affine2d"  # affine2d | polynomial | cir
    max_degree: int = 3
    alphas: tuple = (1, 2, 3)


@dataclass
class CirSection:
    alphas: tuple = (2, 3)
    t_min: float = 0.1
    t_max: float = 1.0
    n_lags: int = 10
    n_chains: int = 1000
    n_samples: int = 1000
    h: float = 0.01
    control_variate: bool = True


@dataclass
class IngestSection:
    path: str | None = None
    format: str = "csv"  # csv | columnar-binary
    sample_interval: float | None = None


@dataclass
class RunConfig:
    kind: str = "affine2d"
    name: str = "custom"
    system: dict = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    score: ScoreSection = field(default_factory=ScoreSection)
    lags: LagSection = field(default_factory=LagSection)
    library: LibrarySection = field(default_factory=LibrarySection)
    mobility: MobilityTrainConfig = field(default_factory=MobilityTrainConfig)
    rom: DataConfig | None = None
    cir: CirSection = field(default_factory=CirSection)
    ingest: IngestSection = field(default_factory=IngestSection)
    out: str = "out"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")

    def system_params(self):
        try:
            if self.kind in ("cir-analytic", "cir-mc"):
                return CirParams(**self.system)
            if self.kind == "ou-oracle":
                return OuParams(**self.system)
            if self.kind == "affine2d":
                sys = {k: _tuples(v) for k, v in self.system.items()}
                return Affine2dParams(**sys)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad system parameters: {exc}") from exc
        return None

    def rom_run(self) -> DataConfig:
        return self.rom if self.rom is not None else replace(self.data, seed=self.data.seed + 1)

    def with_seed(self, seed: int) -> "RunConfig":
        """Reseed every stage from one root seed."""
        cfg = copy.deepcopy(self)
        cfg.data.seed = seed
        cfg.score.stationary.seed = seed
        cfg.score.joint.seed = seed + 1
        cfg.mobility.seed = seed + 2
        if cfg.rom is not None:
            cfg.rom.seed = seed + 3
        return cfg

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def digest(self) -> str:
        """sha256 of the canonical JSON form, excluding the output directory."""
        d = self.to_dict()
        d.pop("out", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def to_yaml(self, path=None) -> str:
        text = yaml.safe_dump(self.to_dict(), sort_keys=False)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be a mapping")
        return _build(cls, d, "config")


def _tuples(obj):
    return tuple(_tuples(v) for v in obj) if isinstance(obj, (list, tuple)) else obj


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_NESTED = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "rom"): DataConfig,
    (RunConfig, "score"): ScoreSection,
    (RunConfig, "lags"): LagSection,
    (RunConfig, "library"): LibrarySection,
    (RunConfig, "mobility"): MobilityTrainConfig,
    (RunConfig, "cir"): CirSection,
    (RunConfig, "ingest"): IngestSection,
    (ScoreSection, "stationary"): ScoreTrainConfig,
    (ScoreSection, "joint"): ScoreTrainConfig,
}


def _build(cls, d: dict, where: str):
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        sub = _NESTED.get((cls, k))
        if sub is not None and v is not None:
            if not isinstance(v, dict):
                raise ConfigError(f"{where}.{k}: expected a mapping")
            v = _build(sub, v, f"{where}.{k}")
        elif isinstance(v, list) and k != "system":
            v = tuple(v)
        kw[k] = v
    try:
        obj = cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    if isinstance(obj, DataConfig):
        try:
            obj.save_stride
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    return obj


def preset_names() -> list[str]:
    root = resources.files("langevin_rom") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_config(name_or_path) -> RunConfig:
    """Load a preset by name or a YAML file by path."""
    p = Path(str(name_or_path))
    if p.suffix in (".yaml", ".yml") and p.exists():
        text = p.read_text()
    else:
        res = resources.files("langevin_rom") / "presets" / f"{name_or_path}.yaml"
        if not res.is_file():
            raise ConfigError(f"no preset or file named {name_or_path!r}; presets: {preset_names()}")
        text = res.read_text()
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return RunConfig.from_dict(d or {})
