"""Run configuration: one JSON file drives generation, training, and evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .asr import AsrConfig
from .encoder import EncoderConfig, FUSION_MODES
from .errors import ConfigError
from .model import ModelConfig
from .sep import SepConfig
from .simulate import DatasetConfig
from .trainer import LossWeights, TrainConfig


@dataclass
class EvalConfig:
    collars: tuple = (0.0, 0.25)
    median_frames: int = 11
    tasks: tuple = ("diar", "sep", "asr")
    threshold: float = 0.5
    figure_items: int = 4

    def validate(self, path="eval"):
        if self.median_frames < 1 or self.median_frames % 2 == 0:
            raise ConfigError(f"{path}.median_frames", "must be a positive odd integer")
        for collar in self.collars:
            if collar < 0:
                raise ConfigError(f"{path}.collars", "collars must be >= 0")
        for task in self.tasks:
            if task not in ("diar", "sep", "asr"):
                raise ConfigError(f"{path}.tasks", f"unknown task {task!r}")
        if not self.tasks:
            raise ConfigError(f"{path}.tasks", "must request at least one task")
        return self


@dataclass
class RunConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        self.data.validate("data")
        self.model.validate("model")
        self.train.validate("train")
        self.weights.validate("train.loss_weights")
        self.eval.validate("eval")
        if self.train.fusion_mode not in FUSION_MODES:
            raise ConfigError("train.fusion_mode",
                              f"must be one of {FUSION_MODES}, got {self.train.fusion_mode!r}")
        return self


def _build(cls, data, path, casts=()):
    """Instantiate a dataclass from a JSON object, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown field")
    kwargs = dict(data)
    for key in casts:
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(path, str(exc)) from exc


def parse_run_config(raw):
    """Parse and validate a JSON-shaped dict into a RunConfig.

    The model's speaker count, sample rate, vocabulary, fusion mode, and
    seed are derived from the data/train sections so they can never drift
    apart.
    """
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = set(raw) - {"data", "model", "train", "eval"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")

    data = _build(DatasetConfig, raw.get("data", {}), "data",
                  casts=("tokens_per_utterance", "snr_db_range"))

    model_raw = dict(raw.get("model", {}))
    for section in ("num_speakers", "sample_rate", "vocab_size", "fusion_mode", "seed"):
        if section in model_raw:
            raise ConfigError(f"model.{section}",
                              "derived from the data/train sections; set it there")
    encoder = _build(EncoderConfig, model_raw.pop("encoder", {}), "model.encoder")
    sep = _build(SepConfig, model_raw.pop("sep", {}), "model.sep")
    asr = _build(AsrConfig, model_raw.pop("asr", {}), "model.asr")
    if model_raw:
        raise ConfigError(f"model.{sorted(model_raw)[0]}", "unknown field")

    train_raw = dict(raw.get("train", {}))
    weights = _build(LossWeights, train_raw.pop("loss_weights", {}), "train.loss_weights")
    train = _build(TrainConfig, train_raw, "train")

    eval_cfg = _build(EvalConfig, raw.get("eval", {}), "eval", casts=("collars", "tasks"))

    model = ModelConfig(num_speakers=data.speakers, sample_rate=data.sample_rate,
                        vocab_size=data.vocab_size, fusion_mode=train.fusion_mode,
                        seed=train.seed, encoder=encoder, sep=sep, asr=asr)
    return RunConfig(data=data, model=model, train=train, weights=weights,
                     eval=eval_cfg).validate()


def load_run_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError("<file>", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON in {path}: {exc}") from exc
    return parse_run_config(raw)
