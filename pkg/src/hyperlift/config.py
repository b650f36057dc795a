"""Run configuration: one JSON document validated into typed sub-configs.
Unknown keys are rejected so a typo cannot silently fall back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

from .encoders import EncoderConfig
from .manifold import ConeParams
from .objectives import LossConfig
from .peft import PeftConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    corpus_seed: int = 0
    n_samples: int = 4000
    glyph_set_size: int = 8
    vqa_seed: int = 1
    n_vqa: int = 2000

    def to_dict(self):
        return asdict(self)


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    text_encoder: EncoderConfig = field(default_factory=EncoderConfig)
    vision_encoder: EncoderConfig = field(default_factory=EncoderConfig)
    peft: PeftConfig = field(default_factory=PeftConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    adapt: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    init_kappa: float = 1.0


def _build(cls, d: dict, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {path!r} must be an object")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"in section {path!r}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"in section {path!r}: {exc}") from None


def _build_loss(d: dict) -> LossConfig:
    d = dict(d)
    cone_k = d.pop("cone_k", None)
    pairs = d.pop("entailment_pairs", None)
    cfg = _build(LossConfig, d, "loss")
    if cone_k is not None:
        cfg.cone = ConeParams(boundary_const=float(cone_k))
    if pairs is not None:
        cfg.entailment_pairs = tuple(tuple(p) for p in pairs)
    return cfg


_SECTIONS = ("seed", "data", "text_encoder", "vision_encoder", "peft",
             "pretrain", "adapt", "loss", "init_kappa")


def run_config_from_dict(doc: dict) -> RunConfig:
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = RunConfig(
        seed=int(doc.get("seed", 0)),
        data=_build(DataConfig, doc.get("data", {}), "data"),
        text_encoder=_build(EncoderConfig, doc.get("text_encoder", {}), "text_encoder"),
        vision_encoder=_build(EncoderConfig, doc.get("vision_encoder", {}), "vision_encoder"),
        peft=_build(PeftConfig, doc.get("peft", {}), "peft"),
        pretrain=_build(TrainConfig, doc.get("pretrain", {}), "pretrain"),
        adapt=_build(TrainConfig, doc.get("adapt", {}), "adapt"),
        loss=_build_loss(doc.get("loss", {})),
        init_kappa=float(doc.get("init_kappa", 1.0)),
    )
    if cfg.text_encoder.proj_dim != cfg.vision_encoder.proj_dim:
        raise ConfigError("text and vision encoders must share proj_dim")
    return cfg


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    return run_config_from_dict(doc)
