"""Experiment configuration.

A config file is YAML with the sections below; every key is optional.  Keys
left out are filled from the defaults at load time and listed in
``ExperimentConfig.defaults_applied`` so the output header can echo them.
Unknown sections or keys are rejected.

.. code-block:: yaml

    seed: 0
    suite:    {n_occluded: 100, n_open: 100, seed_offset: 0, n_train_scenes: 64, train_seed_offset: 100000}
    scene:    {n_objects: [4, 8], n_occluders: [1, 3], hidden_per_occluder: 1}
    sensors:  {vehicle_beams: 32, degrade_factor: 4}
    noise:    {sigma: 0.0, target: pose}
    model:    {channels: 16, num_scales: 2, samples: 4, pillar_height: 0.0, decoder_hidden: 16}
    modes:    {collaboration: true, camera: true, vwf: true, focm: true, rfea: true,
               confidence: or, selection: xnor, transmit: masked}
    protocol: {score_threshold: 0.5, det_threshold: 0.5, nms_iou: 0.5,
               rfea_sigma: 1.0, rfea_kernel: 3, rfea_threshold: 0.02}
    training: {steps: 600, optimizer: adam, lr: 0.003, schedule: cosine, momentum: 0.9, grad_clip: 5.0, pos_weight: 20.0, reg_weight: 1.0,
               degrade_factors: [1, 2, 4]}
    output:   {dir: out, params: null}
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from ..errors import ConfigurationError


@dataclass(frozen=True)
class SuiteConfig:
    n_occluded: int = 100
    n_open: int = 100
    seed_offset: int = 0
    n_train_scenes: int = 64
    train_seed_offset: int = 100000


@dataclass(frozen=True)
class SceneConfig:
    n_objects: tuple[int, int] = (4, 8)
    n_occluders: tuple[int, int] = (1, 3)
    hidden_per_occluder: int = 1


@dataclass(frozen=True)
class SensorConfig:
    vehicle_beams: int = 32
    degrade_factor: int = 4


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float = 0.0
    target: str = "pose"  # pose | features


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    num_scales: int = 2
    samples: int = 4
    pillar_height: float = 0.0
    decoder_hidden: int = 16


@dataclass(frozen=True)
class ModeConfig:
    collaboration: bool = True
    camera: bool = True
    vwf: bool = True
    focm: bool = True
    rfea: bool = True
    confidence: str = "or"  # or | and
    selection: str = "xnor"  # xnor | and
    transmit: str = "masked"  # masked | full


@dataclass(frozen=True)
class ProtocolConfig:
    score_threshold: float = 0.5
    det_threshold: float = 0.5
    nms_iou: float = 0.5
    rfea_sigma: float = 1.0
    rfea_kernel: int = 3
    rfea_threshold: float = 0.02  # trained feature magnitudes are ~0.1, so edges differ by a few hundredths


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 600
    optimizer: str = "adam"  # adam | sgd
    lr: float = 0.003
    schedule: str = "cosine"  # cosine | constant
    momentum: float = 0.9  # sgd momentum, or Adam's first-moment decay
    grad_clip: float = 5.0
    pos_weight: float = 20.0
    reg_weight: float = 1.0
    # vehicle beam factors the training scenes are sensed at; empty means sensors.degrade_factor only
    degrade_factors: tuple[int, ...] = (1, 2, 4)


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"
    params: str | None = None


SECTIONS = {
    "suite": SuiteConfig,
    "scene": SceneConfig,
    "sensors": SensorConfig,
    "noise": NoiseConfig,
    "model": ModelConfig,
    "modes": ModeConfig,
    "protocol": ProtocolConfig,
    "training": TrainConfig,
    "output": OutputConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    sensors: SensorConfig = field(default_factory=SensorConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    modes: ModeConfig = field(default_factory=ModeConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    defaults_applied: tuple[str, ...] = ()

    def __post_init__(self):
        validate(self)

    def with_(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``cfg.with_(**{"modes.rfea": False})``."""
        sections = {f.name: getattr(self, f.name) for f in fields(self)}
        for key, value in changes.items():
            _set(sections, key.replace("__", "."), value)
        return ExperimentConfig(**sections)  # validated once, after all changes

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("defaults_applied")
        return d

    def echo_lines(self) -> list[str]:
        """Flat ``key: value`` lines for output headers, sorted by key."""
        out = []
        for section, values in self.to_dict().items():
            if isinstance(values, dict):
                for k, v in values.items():
                    out.append(f"{section}.{k}: {_fmt(v)}")
            else:
                out.append(f"{section}: {_fmt(values)}")
        return sorted(out)


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "null"
    return repr(v) if isinstance(v, float) else str(v)


def _set(sections: dict, dotted: str, value) -> None:
    if "." not in dotted:
        if dotted not in sections or dotted in SECTIONS:
            raise ConfigurationError(f"unknown config key {dotted!r}")
        sections[dotted] = value
        return
    section, key = dotted.split(".", 1)
    sub = sections.get(section)
    if section not in SECTIONS or key not in {f.name for f in fields(sub)}:
        raise ConfigurationError(f"unknown config key {dotted!r}")
    sections[section] = replace(sub, **{key: _coerce(type(sub), key, value)})


def _coerce(cls, key: str, value):
    default = getattr(cls(), key)
    if isinstance(default, tuple):
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{cls.__name__}.{key} must be true/false, got {value!r}")
        return value
    if isinstance(default, float):
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or int(value) != value:
            raise ConfigurationError(f"{cls.__name__}.{key} must be an integer, got {value!r}")
        return int(value)
    return value


def validate(cfg: ExperimentConfig) -> None:
    m = cfg.modes
    if m.confidence not in ("or", "and"):
        raise ConfigurationError(f"modes.confidence must be 'or' or 'and', got {m.confidence!r}")
    if m.selection not in ("xnor", "and"):
        raise ConfigurationError(f"modes.selection must be 'xnor' or 'and', got {m.selection!r}")
    if m.transmit not in ("masked", "full"):
        raise ConfigurationError(f"modes.transmit must be 'masked' or 'full', got {m.transmit!r}")
    if m.vwf and not m.camera:
        raise ConfigurationError("modes.vwf needs modes.camera")
    if m.focm and not m.vwf:
        raise ConfigurationError("modes.focm needs modes.vwf")
    if cfg.noise.target not in ("pose", "features"):
        raise ConfigurationError(f"noise.target must be 'pose' or 'features', got {cfg.noise.target!r}")
    if cfg.noise.sigma < 0:
        raise ConfigurationError("noise.sigma must be >= 0")
    if cfg.sensors.degrade_factor < 1 or cfg.sensors.vehicle_beams % cfg.sensors.degrade_factor:
        raise ConfigurationError(f"{cfg.sensors.vehicle_beams} beams not divisible by factor {cfg.sensors.degrade_factor}")
    for f in cfg.training.degrade_factors:
        if f < 1 or cfg.sensors.vehicle_beams % f:
            raise ConfigurationError(f"training.degrade_factors: {cfg.sensors.vehicle_beams} beams not divisible by {f}")
    if cfg.protocol.rfea_threshold <= 0:
        raise ConfigurationError("protocol.rfea_threshold must be positive")
    if cfg.protocol.rfea_kernel % 2 != 1:
        raise ConfigurationError("protocol.rfea_kernel must be odd")
    if cfg.model.samples < 1 or cfg.model.num_scales < 1:
        raise ConfigurationError("model.samples and model.num_scales must be >= 1")
    if cfg.training.schedule not in ("cosine", "constant"):
        raise ConfigurationError(f"training.schedule must be 'cosine' or 'constant', got {cfg.training.schedule!r}")
    if cfg.training.optimizer not in ("adam", "sgd"):
        raise ConfigurationError(f"training.optimizer must be 'adam' or 'sgd', got {cfg.training.optimizer!r}")
    if cfg.training.steps < 0:
        raise ConfigurationError("training.steps must be >= 0")


def from_dict(raw: dict[str, Any] | None) -> ExperimentConfig:
    raw = dict(raw or {})
    applied: list[str] = []
    kwargs: dict[str, Any] = {}
    if "seed" in raw:
        kwargs["seed"] = int(raw.pop("seed"))
    else:
        applied.append("seed")
    for name, cls in SECTIONS.items():
        given = raw.pop(name, None) or {}
        if not isinstance(given, dict):
            raise ConfigurationError(f"section {name!r} must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(given) - known
        if unknown:
            raise ConfigurationError(f"unknown key(s) in {name!r}: {sorted(unknown)}")
        values = {k: _coerce(cls, k, v) for k, v in given.items()}
        applied.extend(f"{name}.{k}" for k in sorted(known - set(given)))
        kwargs[name] = cls(**values)
    if raw:
        raise ConfigurationError(f"unknown section(s): {sorted(raw)}")
    return ExperimentConfig(**kwargs, defaults_applied=tuple(applied))


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return from_dict(raw)
