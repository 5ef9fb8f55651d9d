"""Joint model: shared encoder, per-task fusion, and the three task heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .asr import AsrConfig, AsrHead
from .diar import DiarHead, DiarOutput, frame_labels_from_spans
from .encoder import EncoderConfig, SharedEncoder, TaskFusion
from .errors import ConfigError
from .nn import Module
from .rng import stream
from .sep import SepConfig, SepHead

ALL_TASKS = ("diar", "sep", "asr")


@dataclass
class ModelConfig:
    num_speakers: int = 2
    sample_rate: int = 2000
    vocab_size: int = 8
    fusion_mode: str = "rwse"
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sep: SepConfig = field(default_factory=SepConfig)
    asr: AsrConfig = field(default_factory=AsrConfig)

    def validate(self, path="model"):
        if self.num_speakers not in (1, 2, 3):
            raise ConfigError(f"{path}.num_speakers", f"must be 1, 2 or 3, "
                                                      f"got {self.num_speakers}")
        if self.vocab_size < 1:
            raise ConfigError(f"{path}.vocab_size", "must be >= 1")
        self.encoder.validate(f"{path}.encoder")
        self.sep.validate(f"{path}.sep")
        self.asr.validate(f"{path}.asr")
        return self

    def to_dict(self):
        return {
            "num_speakers": self.num_speakers,
            "sample_rate": self.sample_rate,
            "vocab_size": self.vocab_size,
            "fusion_mode": self.fusion_mode,
            "seed": self.seed,
            "encoder": vars(self.encoder).copy(),
            "sep": vars(self.sep).copy(),
            "asr": vars(self.asr).copy(),
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        return cls(
            num_speakers=data["num_speakers"],
            sample_rate=data["sample_rate"],
            vocab_size=data["vocab_size"],
            fusion_mode=data["fusion_mode"],
            seed=data.get("seed", 0),
            encoder=EncoderConfig(**data["encoder"]),
            sep=SepConfig(**data["sep"]),
            asr=AsrConfig(**data["asr"]),
        )


@dataclass
class ItemForward:
    """Everything one forward pass produces for one item."""
    layers: list
    fused: dict
    diar: DiarOutput | None = None
    sep_estimates: list | None = None
    sep_masks: list | None = None
    asr_reps: list | None = None


class JointModel(Module):
    def __init__(self, config, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        rng = stream(config.seed, "init")
        self.encoder = SharedEncoder(config.encoder, rng, dtype)
        self.fusion = TaskFusion(config.fusion_mode, config.encoder.layers, dtype)
        self.diar_head = DiarHead(config.encoder.d_model, config.num_speakers, rng, dtype)
        self.sep_head = SepHead(config.sep, config.encoder.d_model, config.num_speakers,
                                rng, dtype)
        self.asr_head = AsrHead(config.asr, config.encoder.d_model, config.num_speakers,
                                config.vocab_size, rng, dtype)

    def forward_item(self, wave, tasks=ALL_TASKS):
        """Run the encoder plus the requested heads on one waveform array."""
        wave_t = T.Tensor(np.asarray(wave, dtype=self.dtype))
        layers = self.encoder.encode_layers(wave_t)
        fused = self.fusion.fuse(layers)
        out = ItemForward(layers=layers, fused=fused)
        if "diar" in tasks:
            out.diar = self.diar_head(fused["diar"])
        if "sep" in tasks:
            out.sep_estimates, out.sep_masks = self.sep_head(wave_t, fused["sep"])
        if "asr" in tasks:
            out.asr_reps = self.asr_head.speaker_encode(fused["asr"])
        return out

    def diar_labels(self, item, num_frames):
        return frame_labels_from_spans(item.activity, item.length, num_frames)

    def infer_item(self, wave, tasks=ALL_TASKS):
        """Forward pass returning plain numpy results for reporting."""
        out = self.forward_item(wave, tasks)
        result = {}
        if out.diar is not None:
            result["diar_probs"] = out.diar.probs.data.copy()
        if out.sep_estimates is not None:
            result["estimates"] = [e.data.copy() for e in out.sep_estimates]
        if out.asr_reps is not None:
            result["hypotheses"] = [self.asr_head.greedy_decode(rep)
                                    for rep in out.asr_reps]
        return result


def build_model(config, dtype=np.float32):
    return JointModel(config, dtype)
