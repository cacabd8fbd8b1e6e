"""
Pipeline configuration: one JSON document with a section per stage.

Section dataclasses live next to the code they configure; this module
adds the path/evaluation/transition sections and composes everything into
``PipelineConfig``. Unknown keys are rejected at every level.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .dataset import DatasetConfig
from .errors import ConfigError, StageInputError
from .fusion import FusionConfig
from .model import UNetConfig
from .synth import SynthConfig
from .trainer import TilingConfig, TrainConfig


def _reject_unknown(section: str, data: Dict[str, Any], known) -> None:
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown {section} keys: {', '.join(unknown)}")


def _class_table(raw: Dict[Any, Any], section: str) -> Dict[int, str]:
    try:
        return {int(code): str(name) for code, name in raw.items()}
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: class codes must be integers: {e}") from e


@dataclass(frozen=True)
class PathsConfig:
    """Working directory for stage outputs, plus optional external inputs.

    Inputs left unset default to the outputs of the synth stage.
    """

    workdir: str = "noisemap-work"
    image: Optional[str] = None
    truth: Optional[str] = None
    labels: Optional[str] = None
    points: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PathsConfig":
        _reject_unknown('paths', data, cls.__dataclass_fields__)
        return cls(**data)

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class EvaluateConfig:
    """``source`` picks the hard map to assess: the raw prediction or the fused posterior."""

    source: str = "predict"
    regions: Optional[str] = None
    region_names: Dict[int, str] = field(default_factory=dict)
    statistics: Optional[str] = None
    permutations: int = 10_000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.source not in ("predict", "fuse"):
            raise ConfigError(f"evaluate.source must be 'predict' or 'fuse', got {self.source!r}")
        if self.permutations < 100:
            raise ConfigError(f"evaluate.permutations must be >= 100, got {self.permutations}")
        object.__setattr__(self, 'region_names', _class_table(self.region_names, 'evaluate.region_names'))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvaluateConfig":
        _reject_unknown('evaluate', data, cls.__dataclass_fields__)
        return cls(**data)

    def as_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['region_names'] = {str(k): v for k, v in sorted(self.region_names.items())}
        return data


@dataclass(frozen=True)
class TransitionsConfig:
    """Two epoch maps (default: synthetic truth and the predicted map) and their class table.

    When ``palm_a``/``palm_b`` are given, those plantation maps are burned into
    the corresponding land-cover map under ``palm_code`` first.
    """

    map_a: Optional[str] = None
    map_b: Optional[str] = None
    classes: Dict[int, str] = field(default_factory=lambda: {0: "other", 1: "plantation"})
    palm_a: Optional[str] = None
    palm_b: Optional[str] = None
    palm_code: int = 1
    hectares: bool = False

    def __post_init__(self) -> None:
        classes = _class_table(self.classes, 'transitions.classes')
        if not classes:
            raise ConfigError("transitions.classes must not be empty")
        if not 0 <= self.palm_code <= 255:
            raise ConfigError(f"transitions.palm_code must fit in a byte, got {self.palm_code}")
        object.__setattr__(self, 'classes', classes)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TransitionsConfig":
        _reject_unknown('transitions', data, cls.__dataclass_fields__)
        return cls(**data)

    def as_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['classes'] = {str(k): v for k, v in sorted(self.classes.items())}
        return data


SECTIONS = {
    'paths': PathsConfig,
    'synth': SynthConfig,
    'dataset': DatasetConfig,
    'model': UNetConfig,
    'train': TrainConfig,
    'tiling': TilingConfig,
    'fusion': FusionConfig,
    'evaluate': EvaluateConfig,
    'transitions': TransitionsConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    """Every stage's settings; missing sections take their defaults."""

    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    transitions: TransitionsConfig = field(default_factory=TransitionsConfig)

    def __post_init__(self) -> None:
        self.model.check_tile(self.dataset.tile)
        self.model.check_tile(self.tiling.tile)
        if self.model.in_bands != self.synth.landscape.bands:
            logging.warning("model.in_bands (%s) differs from synth.landscape.bands (%s)",
                            self.model.in_bands, self.synth.landscape.bands)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"Pipeline config must be a JSON object, got {type(data).__name__}")
        _reject_unknown('top-level', data, SECTIONS)

        sections = {}
        for name, section_cls in SECTIONS.items():
            raw = data.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"Section '{name}' must be an object")
            try:
                sections[name] = section_cls.from_dict(raw)
            except ConfigError as e:
                raise ConfigError(f"{name}: {e}") from e
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{name}: invalid value: {e}") from e
        return cls(**sections)

    @classmethod
    def from_json(cls, config_path: Union[str, Path]) -> "PipelineConfig":
        config_path = Path(config_path)
        if not config_path.exists():
            raise StageInputError(f"Config file not found: {config_path}", path=config_path)
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            logging.error("Error parsing config %s: %s", config_path, e)
            raise ConfigError(f"Config {config_path} is not valid JSON: {e}") from e
        return cls.from_dict(raw)

    @classmethod
    def from_any(cls, config_data: Union["PipelineConfig", Dict[str, Any], str, Path]) -> "PipelineConfig":
        if isinstance(config_data, cls):
            return config_data
        if isinstance(config_data, (str, Path)):
            return cls.from_json(config_data)
        if not isinstance(config_data, dict):
            raise TypeError(f"Unsupported config type: {type(config_data)}")
        return cls.from_dict(config_data)

    def as_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name).as_dict() for name in SECTIONS}
