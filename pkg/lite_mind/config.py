"""Run configuration: defaults <- JSON file <- --set overrides <- dedicated flags"""
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence

from lite_mind.backbone import BackboneConfig
from lite_mind.constants import RUN_CONFIG_FILE
from lite_mind.data_handler import SyntheticSpec
from lite_mind.errors import ConfigError
from lite_mind.projector import ProjectorConfig
from lite_mind.retrieval import RetrievalProtocol
from lite_mind.training import LossConfig, OptimizerConfig, TrainConfig
from lite_mind.utils import read_json, write_json

logger = logging.getLogger(__name__)


@dataclass
class PathsConfig:
    train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    out_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    cls_checkpoint: Optional[str] = None
    projector: Optional[str] = None
    index: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "PathsConfig":
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown paths fields: {sorted(unknown)}")
        return cls(**values)


SECTIONS = {
    'backbone': BackboneConfig,
    'loss': LossConfig,
    'optimizer': OptimizerConfig,
    'train': TrainConfig,
    'protocol': RetrievalProtocol,
    'projector': ProjectorConfig,
    'synthetic': SyntheticSpec,
    'paths': PathsConfig,
}


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: RetrievalProtocol = field(default_factory=RetrievalProtocol)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name).to_dict() for name in SECTIONS}

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "RunConfig":
        unknown = set(values) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        sections = {}
        for name, section_cls in SECTIONS.items():
            section = values.get(name, {})
            if not isinstance(section, Mapping):
                raise ConfigError(f"config section {name} must be an object")
            try:
                sections[name] = section_cls.from_dict(dict(section))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad value in section {name}: {e}") from e
        return cls(**sections)

    def save(self, directory: Path) -> Path:
        path = Path(directory) / RUN_CONFIG_FILE
        write_json(path, self.to_dict())
        return path


def parse_override(text: str) -> tuple:
    """'section.key=value' with value parsed as JSON, falling back to a plain string"""
    target, sep, raw = text.partition('=')
    section, dot, key = target.partition('.')
    if not sep or not dot or not section or not key:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


def load_run_config(path: Optional[Path] = None, overrides: Sequence[str] = (),
                    flags: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Resolve a RunConfig; `flags` maps 'section.key' to dedicated CLI flag values (None = unset)"""
    values: Dict[str, Dict[str, Any]] = {}
    if path is not None:
        try:
            loaded = read_json(path)
        except FileNotFoundError as e:
            raise ConfigError(f"config file {path} does not exist") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        values = {name: dict(section) if isinstance(section, Mapping) else section
                  for name, section in loaded.items()}
    updates = [parse_override(text) for text in overrides]
    for target, value in (flags or {}).items():
        if value is not None:
            section, _, key = target.partition('.')
            updates.append((section, key, value))
    for section, key, value in updates:
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        values.setdefault(section, {})[key] = value
    config = RunConfig.from_dict(values)
    logger.debug(f"Resolved run config from {path} with {len(updates)} overrides")
    return config
