"""TOML run configuration with dotted-key overrides.

Five sections mirror the pipeline stages: [scene], [grounding], [sensors],
[diffusion], [eval]. Any field can be overridden on the command line with
--section.key=value; values parse as TOML fragments (so bare words are
strings, numbers are numbers).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ValidationError
from .scene import RelationParams
from .sensors import SensorParams


@dataclass
class SceneSection:
    cloud: str = ""
    detections: str = ""
    near_threshold: float = 1.0
    far_threshold: float = 2.0
    overlap_min: float = 0.25
    contact_eps: float = 0.05
    between_margin: float = 0.1
    between_lateral_max: float = 0.5

    def relation_params(self) -> RelationParams:
        return RelationParams(
            self.near_threshold, self.far_threshold, self.overlap_min,
            self.contact_eps, self.between_margin, self.between_lateral_max,
        )


@dataclass
class GroundingSection:
    method: str = "symbolic"        # symbolic | llm
    backend: str = "graph-mock"     # graph-mock | scripted | http   (llm method only)
    model: str = "gpt-3.5-turbo"
    temperature: float = 0.0
    few_shot: bool = True
    num_examples: int = 3
    max_retries: int = 2
    fallback: str = "symbolic"      # symbolic | strict
    transcript: str = ""            # scripted backend transcript path


@dataclass
class SensorsSection:
    env_extent: float = 4.0
    traj_extent: float = 2.0
    nn_radius: float = 1.0
    target_inflation: float = 0.1

    def sensor_params(self) -> SensorParams:
        return SensorParams(self.env_extent, self.traj_extent, self.nn_radius, self.target_inflation)


@dataclass
class DiffusionSection:
    t_steps: int = 100
    schedule: str = "linear"
    token_dim: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 256
    max_frames: int = 128
    text_dim: int = 32
    n_joints: int = 22
    n_frames: int = 16
    seed: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 16
    steps: int = 200
    pretrain: bool = False
    data_items: int = 64            # synthetic training set size
    data_seed: int = 0
    traj_checkpoint: str = ""
    motion_checkpoint: str = ""
    text_backend: str = "hashed"    # hashed | file
    embeddings: str = ""            # file backend table path


@dataclass
class EvalSection:
    diversity_pairs: int = 200
    multimodality_pairs: int = 20
    seed: int = 0


_SECTIONS = {
    "scene": SceneSection,
    "grounding": GroundingSection,
    "sensors": SensorsSection,
    "diffusion": DiffusionSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    scene: SceneSection = field(default_factory=SceneSection)
    grounding: GroundingSection = field(default_factory=GroundingSection)
    sensors: SensorsSection = field(default_factory=SensorsSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}


def _build_section(cls, data: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"unknown key(s) {unknown} in [{name}]")
    return cls(**data)


def _parse_override_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw  # bare word: treat as string


def parse_override(text: str):
    """Split "section.key=value" into (section, key, typed value)."""
    key_part, sep, raw_value = text.partition("=")
    if not sep:
        raise ValidationError(f"override {text!r} must look like section.key=value")
    section, sep, key = key_part.partition(".")
    if not sep or not key:
        raise ValidationError(f"override key {key_part!r} must look like section.key")
    if section not in _SECTIONS:
        raise ValidationError(f"unknown config section {section!r} (have {sorted(_SECTIONS)})")
    return section, key, _parse_override_value(raw_value)


def config_from_dict(data: dict) -> RunConfig:
    """Rebuild a RunConfig from the nested dict produced by RunConfig.to_dict."""
    return RunConfig(**{
        name: _build_section(cls, dict(data.get(name, {})), name)
        for name, cls in _SECTIONS.items()
    })


def load_config(path=None, overrides=()) -> RunConfig:
    data = {name: {} for name in _SECTIONS}
    if path:
        raw = tomllib.loads(Path(path).read_text())
        unknown = sorted(set(raw) - set(_SECTIONS))
        if unknown:
            raise ValidationError(f"unknown config section(s) {unknown} in {path}")
        for name, section in raw.items():
            if not isinstance(section, dict):
                raise ValidationError(f"section [{name}] must be a table")
            data[name].update(section)
    for text in overrides:
        section, key, value = parse_override(text)
        data[section][key] = value
    return RunConfig(**{name: _build_section(cls, data[name], name) for name, cls in _SECTIONS.items()})
