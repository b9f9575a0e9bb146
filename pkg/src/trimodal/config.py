"""Pipeline configuration: one JSON document, one section per dataclass.

Sections and their key sets::

    encoder    EncoderConfig fields except vocab_size (taken from the data)
    synthetic  SyntheticSpec fields
    train      TrainConfig fields for phase 1 (minus loss / weights)
    distill    TrainConfig fields for phase 2 (minus loss / weights)
    loss       LossConfig fields, shared by both phases
    weights    EnsembleWeights fields
    index      IndexParams fields (dim is taken from the encoder)
    rag        max_tokens, k, rerank, rerank_pool

plus top-level ``seed`` (encoder init, batching, index levels) and
``student_seed_offset`` (phase-2 students start from ``seed + offset``).
Unknown keys are rejected.

The defaults are the tuned desk-scale settings used by the acceptance suite,
not the dataclass defaults: the bare TrainConfig keeps the small plain-SGD
rate, which does not move a randomly initialised encoder far enough in a few
hundred steps.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .encoder import EncoderConfig
from .errors import DataError
from .hnsw import IndexParams
from .losses import LossConfig
from .rag import RagParams
from .scoring import EnsembleWeights
from .synthetic import SyntheticSpec
from .trainer import TrainConfig


class ConfigError(DataError):
    """Invalid configuration document."""


def phase1_defaults() -> TrainConfig:
    return TrainConfig(lr_max=2e-3, lr_min=0.0, cycle_length=10**6, epochs=10, batch_size=32, optimizer="adam")


def phase2_defaults() -> TrainConfig:
    return TrainConfig(lr_max=3e-3, lr_min=0.0, cycle_length=10**6, epochs=100, batch_size=32, optimizer="adam")


@dataclass
class EncoderSection:
    dim: int = 64
    layers: int = 2
    heads: int = 2
    max_len: int = 128
    ffn_mult: int = 4

    def build(self, vocab_size: int, seed: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, seed=seed, **asdict(self))


@dataclass
class RagSection:
    # one definition per chunk and a single retrieved chunk: a note holds a
    # few definitions, so larger chunks blur the categories together
    max_tokens: int = 16
    k: int = 1
    rerank: Optional[str] = None
    rerank_pool: int = 20


@dataclass
class PipelineConfig:
    seed: int = 0
    student_seed_offset: int = 1
    encoder: EncoderSection = field(default_factory=EncoderSection)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=phase1_defaults)
    distill: TrainConfig = field(default_factory=phase2_defaults)
    loss: LossConfig = field(default_factory=LossConfig)
    weights: EnsembleWeights = field(default_factory=EnsembleWeights)
    index: IndexParams = field(default_factory=IndexParams)
    rag: RagSection = field(default_factory=RagSection)

    def encoder_config(self, vocab_size: int, seed: Optional[int] = None) -> EncoderConfig:
        return self.encoder.build(vocab_size, self.seed if seed is None else seed)

    def phase1(self) -> TrainConfig:
        return replace(self.train, seed=self.seed, loss=self.loss, weights=self.weights)

    def phase2(self) -> TrainConfig:
        return replace(self.distill, seed=self.seed, loss=self.loss, weights=self.weights)

    def index_params(self) -> IndexParams:
        return replace(self.index, dim=self.encoder.dim, seed=self.seed)

    def rag_params(self) -> RagParams:
        return RagParams(index=self.index_params(), **asdict(self.rag))

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"seed": self.seed, "student_seed_offset": self.student_seed_offset}
        for name in ("encoder", "synthetic", "loss", "weights", "index", "rag"):
            out[name] = asdict(getattr(self, name))
        for name in ("train", "distill"):
            d = asdict(getattr(self, name))
            d.pop("loss"), d.pop("weights")
            d["adam_betas"] = list(d["adam_betas"])
            out[name] = d
        out["index"].pop("dim"), out["index"].pop("seed")
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _section(cls, base, values: Any, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {unknown}")
    if "adam_betas" in values:
        values = {**values, "adam_betas": tuple(values["adam_betas"])}
    try:
        return replace(base, **values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"section {name!r}: {e}") from None


_SECTIONS = {
    "encoder": EncoderSection,
    "synthetic": SyntheticSpec,
    "train": TrainConfig,
    "distill": TrainConfig,
    "loss": LossConfig,
    "weights": EnsembleWeights,
    "index": IndexParams,
    "rag": RagSection,
}


def config_from_dict(d: Dict[str, Any]) -> PipelineConfig:
    cfg = PipelineConfig()
    unknown = sorted(set(d) - set(_SECTIONS) - {"seed", "student_seed_offset"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    for key in ("seed", "student_seed_offset"):
        if key in d:
            if not isinstance(d[key], int) or d[key] < 0:
                raise ConfigError(f"{key} must be a non-negative integer")
            cfg = replace(cfg, **{key: d[key]})
    for name, cls in _SECTIONS.items():
        if name in d:
            if name in ("train", "distill") and ({"loss", "weights"} & set(d[name])):
                raise ConfigError(f"put loss and weights in their own sections, not under {name!r}")
            if name == "index" and ({"dim", "seed"} & set(d[name])):
                raise ConfigError("index dim and seed follow the encoder and the top-level seed")
            cfg = replace(cfg, **{name: _section(cls, getattr(cfg, name), d[name], name)})
    return cfg


def load_config(path: Optional[Union[str, Path]]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(d)

