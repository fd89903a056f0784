"""Structured run configuration: one documented key tree covering every
stage, loaded from YAML with unknown keys rejected, and re-emitted fully
resolved next to each command's outputs.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .cascade import CascadeConfig
from .classifier import ClassifierConfig
from .data import SynthSpec
from .head import HeadConfig


@dataclass
class PrepareConfig:
    crop_size: int = 224
    negatives_per_image: int = 2


@dataclass
class DetectorTrainConfig:
    epochs: int = 8
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    log_every: int = 20


@dataclass
class ClassifierTrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    augment: bool = True


@dataclass
class SynthConfig:
    n_train: int = 200
    n_test: int = 50
    spec: SynthSpec = field(default_factory=SynthSpec)


@dataclass
class EvaluateConfig:
    radius: float = 20.0


@dataclass
class RunConfig:
    seed: int = 0
    device: str = "cpu"
    synth: SynthConfig = field(default_factory=SynthConfig)
    prepare: PrepareConfig = field(default_factory=PrepareConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    detector_train: DetectorTrainConfig = field(default_factory=DetectorTrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    classifier_train: ClassifierTrainConfig = field(default_factory=ClassifierTrainConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)


# nested dataclass fields, resolved explicitly (field annotations may be strings)
_NESTED = {
    RunConfig: {"synth": SynthConfig, "prepare": PrepareConfig, "backbone": BackboneConfig,
                "head": HeadConfig, "detector_train": DetectorTrainConfig,
                "classifier": ClassifierConfig, "classifier_train": ClassifierTrainConfig,
                "cascade": CascadeConfig, "evaluate": EvaluateConfig},
    SynthConfig: {"spec": SynthSpec},
}


def _build_strict(cls, mapping, path=""):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ValueError(f"config key '{path}' must be a mapping, got {type(mapping).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - known
    if unknown:
        raise ValueError(f"unknown config key(s) under '{path or 'root'}': {sorted(unknown)}")
    nested = _NESTED.get(cls, {})
    kwargs = {}
    for name, value in mapping.items():
        sub = f"{path}.{name}" if path else name
        if name in nested:
            kwargs[name] = _build_strict(nested[name], value, sub)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(mapping):
    return _build_strict(RunConfig, mapping)


def config_to_dict(cfg):
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [convert(v) for v in obj]
        return obj
    return convert(cfg)


def load_config(path):
    with open(path) as f:
        data = yaml.safe_load(f)
    return config_from_dict(data or {})


def save_config(path, cfg: RunConfig):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True)
