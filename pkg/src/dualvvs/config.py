"""Experiment configuration: one file describes training, data, probes and scoring."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .augment import AugmentPolicy
from .data import REGIONS
from .model import BLOCK_LAYERS, LAYER_REGISTRY, BackboneConfig, HeadConfig
from .trainer import TrainConfig

PAPER_ALPHAS = [0.0, 0.00002, 0.0001, 0.0005, 0.002, 0.01, 0.05]

# region -> generator layer for synthetic recordings, shallow to deep
SYNTH_REGION_LAYERS = {"V1": "layer1.1", "V2": "layer2.1", "V4": "layer3.1", "IT": "layer4.1"}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | stl10 | imagedir
    # stl10: directory holding the binaries; imagedir: directory with train/ and test/ class folders
    path: Optional[str] = None
    pretrain_split: str = "unlabeled"
    synth_seed: int = 0
    synth_train_count: int = 4000
    synth_test_count: int = 2000
    synth_classes: int = 4

    def __post_init__(self):
        if self.source not in ("synthetic", "stl10", "imagedir"):
            raise ValueError(f"source must be synthetic, stl10 or imagedir, got {self.source!r}")
        if self.source != "synthetic" and not self.path:
            raise ValueError(f"source {self.source!r} needs a path")
        if self.pretrain_split not in ("train", "unlabeled"):
            raise ValueError(f"bad pretrain_split {self.pretrain_split!r}")
        if self.synth_train_count < 2 or self.synth_test_count < 1 or self.synth_classes < 2:
            raise ValueError("synthetic counts must be positive and synth_classes >= 2")


@dataclass
class ProbeConfig:
    l2: float = 1e-4
    max_iter: int = 500
    rpp_seed: int = 0
    rpp_samples_per_image: int = 1

    def __post_init__(self):
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if self.max_iter < 1 or self.rpp_samples_per_image < 1:
            raise ValueError("max_iter and rpp_samples_per_image must be >= 1")


@dataclass
class BrainConfig:
    # region -> container directory, or "synthetic" for a generated recording
    regions: dict = field(default_factory=lambda: {r: "synthetic" for r in REGIONS})
    layers: list = field(default_factory=lambda: list(BLOCK_LAYERS))
    n_splits: int = 10
    train_fraction: float = 0.9
    cv_seed: int = 0
    n_components: int = 25
    max_features: int = 4096
    synth_seed: int = 1
    synth_stimuli: int = 300
    synth_neurons: int = 60
    synth_noise_sd: float = 0.5
    synth_repetitions: int = 4

    def __post_init__(self):
        for region in self.regions:
            if region not in REGIONS:
                raise ValueError(f"unknown region {region!r}; expected one of {list(REGIONS)}")
        unknown = [n for n in self.layers if n not in LAYER_REGISTRY]
        if unknown:
            raise ValueError(f"unknown layers {unknown}; valid: {list(LAYER_REGISTRY)}")
        if not self.layers:
            raise ValueError("layers must not be empty")
        if self.synth_repetitions < 2:
            raise ValueError("synth_repetitions must be >= 2")


@dataclass
class ExperimentConfig:
    name: str = "desk"
    output_dir: str = "runs"
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    data: DataConfig = field(default_factory=DataConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    brain: BrainConfig = field(default_factory=BrainConfig)
    sweep_alphas: list = field(default_factory=lambda: [0.0, 0.01])

    def __post_init__(self):
        if any(a < 0 for a in self.sweep_alphas):
            raise ValueError("sweep_alphas must be >= 0")

    # -- presets -----------------------------------------------------------------
    @classmethod
    def desk(cls) -> "ExperimentConfig":
        return cls()

    @classmethod
    def paper(cls) -> "ExperimentConfig":
        """Full-scale recipe on STL-10; expects the data under the data root."""
        return cls(
            name="paper", train=TrainConfig.paper(),
            data=DataConfig(source="stl10", path="stl10_binary", pretrain_split="unlabeled"),
            brain=BrainConfig(regions={"V1": "v1v2/V1", "V2": "v1v2/V2", "V4": "v4it/V4", "IT": "v4it/IT"}),
            sweep_alphas=list(PAPER_ALPHAS),
        )

    # -- serialization -------------------------------------------------------------
    def to_dict(self) -> dict:
        return _plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "")

    def dumps(self, fmt: str = "yaml") -> str:
        if fmt == "json":
            return json.dumps(self.to_dict(), indent=2, sort_keys=True)
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps("json" if path.suffix == ".json" else "yaml"))
        return path

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text()
        try:
            raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must hold a mapping at top level")
        return cls.from_dict(raw)

    def with_overrides(self, assignments) -> "ExperimentConfig":
        """Apply ``dotted.path=value`` strings; values are parsed as JSON, then YAML."""
        d = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep or not key:
                raise ConfigError(f"override {item!r} is not of the form dotted.path=value")
            parts = key.split(".")
            node = d
            for i, part in enumerate(parts[:-1]):
                if not isinstance(node, dict) or part not in node:
                    raise ConfigError(f"{'.'.join(parts[:i + 1])}: unknown field")
                node = node[part]
            # brain.regions is the one open mapping: new regions may be added
            open_mapping = parts[:-1] == ["brain", "regions"]
            if not isinstance(node, dict) or (parts[-1] not in node and not open_mapping):
                raise ConfigError(f"{key}: unknown field")
            node[parts[-1]] = parse_value(raw)
        return ExperimentConfig.from_dict(d)


def parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return yaml.safe_load(raw)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


_NESTED = {
    (ExperimentConfig, "train"): TrainConfig,
    (ExperimentConfig, "data"): DataConfig,
    (ExperimentConfig, "probe"): ProbeConfig,
    (ExperimentConfig, "brain"): BrainConfig,
    (TrainConfig, "augment"): AugmentPolicy,
    (TrainConfig, "backbone"): BackboneConfig,
    (TrainConfig, "heads"): HeadConfig,
}


def _default_of(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _check_type(value, default, where):
    """Reject values whose JSON type disagrees with the field default."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return type(default)(value)
    elif isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {value!r}")
    return value


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {d!r}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}: unknown field (valid: {sorted(fields)})")
    kwargs = {}
    for name, value in d.items():
        where = prefix + name
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, where + ".")
        else:
            kwargs[name] = _check_type(value, _default_of(fields[name]), where)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{prefix.rstrip('.') or cls.__name__}: {exc}") from exc
