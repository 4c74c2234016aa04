"""Experiment configuration: INI-style sections mapped onto dataclasses.

Every key has a default. Precedence is ``--set`` overrides > config file >
defaults, and unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class DataSection:
    data_root: str = ""
    seed: int = 0
    height: int = 32
    width: int = 16
    num_ids: int = 50
    shots_per_id: int = 8
    num_test_ids: int = 50
    query_per_id: int = 2
    num_cameras: int = 4
    occlusion_prob: float = 0.3
    blur_prob: float = 0.2
    viewpoint_jitter: float = 0.5
    pad: int = 4
    flip_prob: float = 0.5
    erase_prob: float = 0.5


@dataclass
class BackboneSection:
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    embed_dim: int = 128


@dataclass
class SamplerSection:
    P: int = 16
    K: int = 4
    seed: int = 0


@dataclass
class OptimizerSection:
    lr: float = 3.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    teacher_epochs: int = 60
    student_epochs: int = 60
    decay_at: float = 2 / 3
    decay_factor: float = 0.1
    early_stop_delta: float = 1e-3
    early_stop_patience: int = 5


@dataclass
class ReidSection:
    smoothing_epsilon: float = 0.1
    triplet_margin: float = 0.3
    w_cls: float = 1.0
    w_tri: float = 1.0


@dataclass
class DistillSection:
    kind: str = "umts"
    lambdas: list[float] = field(default_factory=lambda: [0.1, 0.1, 0.1, 0.1, 0.5])
    stages: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    reductions: list[int] = field(default_factory=lambda: [16, 16, 16, 16, 4])
    upsilon_reg_factor: float = 0.5
    teacher_groups_per_id: int = 2


@dataclass
class EvalSection:
    max_rank: int = 20
    batch_size: int = 256
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass
class Config:
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    reid: ReidSection = field(default_factory=ReidSection)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        self.validate()

    def validate(self):
        d = self.distill
        if len(d.lambdas) != 5:
            raise ValueError(f"distill.lambdas needs 5 entries, got {len(d.lambdas)}")
        if any(x < 0 for x in d.lambdas):
            raise ValueError("distill.lambdas must be nonnegative")
        if len(d.reductions) != 5:
            raise ValueError(f"distill.reductions needs 5 entries, got {len(d.reductions)}")
        if not d.stages or any(b not in (1, 2, 3, 4, 5) for b in d.stages):
            raise ValueError(f"distill.stages must be a nonempty subset of 1..5, got {d.stages}")
        if d.kind not in ("umts", "mts"):
            raise ValueError(f"distill.kind must be 'umts' or 'mts', got {d.kind!r}")
        if self.sampler.K < 2:
            raise ValueError(f"sampler.K must be >= 2 (K=1 makes the teacher a student), "
                             f"got {self.sampler.K}")
        if self.sampler.P < 2:
            raise ValueError(f"sampler.P must be >= 2, got {self.sampler.P}")
        if len(self.backbone.stage_channels) != 4:
            raise ValueError("backbone.stage_channels needs 4 entries")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        cfg = cls()
        for section, values in d.items():
            for key, value in values.items():
                _assign(cfg, section, key, value)
        cfg.validate()
        return cfg


def _section(cfg: Config, name: str):
    if name not in {f.name for f in dataclasses.fields(Config)}:
        raise KeyError(f"unknown config section [{name}]")
    return getattr(cfg, name)


def _parse(text, hint):
    if not isinstance(text, str):
        return list(text) if isinstance(text, (list, tuple)) else text
    origin = typing.get_origin(hint)
    if origin is list:
        (item,) = typing.get_args(hint)
        parts = [p.strip() for p in text.strip("[]").split(",") if p.strip()]
        return [item(p) for p in parts]
    if hint is bool:
        low = text.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("1", "true", "yes")
    return hint(text.strip())


def _assign(cfg: Config, section: str, key: str, value):
    sec = _section(cfg, section)
    hints = typing.get_type_hints(type(sec))
    if key not in hints:
        raise KeyError(f"unknown config key {section}.{key}")
    try:
        setattr(sec, key, _parse(value, hints[key]))
    except (TypeError, ValueError) as exc:
        raise ValueError(f"bad value for {section}.{key}: {value!r} ({exc})") from None


def load_config(path=None, overrides=()) -> Config:
    cfg = Config()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        parser.read(path)
        for section in parser.sections():
            for key, value in parser.items(section):
                _assign(cfg, section, key, value)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _assign(cfg, section, key, value)
    cfg.validate()
    return cfg


def dump_config(cfg: Config, path):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, values in cfg.to_dict().items():
        parser[name] = {k: (",".join(map(str, v)) if isinstance(v, list) else str(v))
                        for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)
