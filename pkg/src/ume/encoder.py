"""Shared speech encoder and per-task layer fusion.

The encoder is a strided-conv frontend (total subsampling 4) followed by a
stack of identical two-branch blocks: a depthwise-conv branch and a
self-attention branch over the same normalized input, summed and passed
through a pointwise feed-forward with a residual connection. Every layer's
output is kept so the task heads can fuse them.

Fusion modes:
  * ``none``          -- each task reads the last layer directly
  * ``weighted_sum``  -- softmax-weighted sum of all layers, per task
  * ``rwse``          -- weighted sum plus a residual copy of the last layer
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import (Conv1d, DepthwiseConv1d, FeedForward, LayerNorm, Module,
                 MultiHeadAttention, PReLU, sinusoidal_positions)
from .optim import Parameter

TASKS = ("diar", "sep", "asr")
FUSION_MODES = ("none", "weighted_sum", "rwse")
SUBSAMPLE = 4
MIN_INPUT = 8


@dataclass
class EncoderConfig:
    layers: int = 4
    d_model: int = 32
    heads: int = 2
    conv_kernel: int = 3
    ff_width: int = 64
    positions: bool = True

    def validate(self, path="model.encoder"):
        if self.layers < 1:
            raise ConfigError(f"{path}.layers", "must be >= 1")
        if self.d_model % self.heads:
            raise ConfigError(f"{path}.d_model",
                              f"{self.d_model} not divisible by heads {self.heads}")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"{path}.conv_kernel", "must be a positive odd integer")
        if self.ff_width < 1:
            raise ConfigError(f"{path}.ff_width", "must be >= 1")
        return self


class Frontend(Module):
    """Two stride-2 convolutions: waveform [T] -> frames [floor(T/4), D]."""

    def __init__(self, d_model, rng, dtype=np.float32):
        self.conv1 = Conv1d(1, d_model, 4, rng, stride=2, padding=1, dtype=dtype)
        self.conv2 = Conv1d(d_model, d_model, 4, rng, stride=2, padding=1, dtype=dtype)

    def __call__(self, wave):
        if wave.ndim != 1:
            raise ShapeError("frontend", f"expected a 1-d waveform, got shape {wave.shape}")
        if wave.shape[0] < MIN_INPUT:
            raise ShapeError("frontend", f"input length {wave.shape[0]} below the "
                                         f"minimum of {MIN_INPUT} samples")
        h = T.reshape(wave, (wave.shape[0], 1))
        h = T.relu(self.conv1(h))
        return T.relu(self.conv2(h))


class EncoderBlock(Module):
    """LayerNorm, then depthwise-conv + self-attention branches summed,
    then a pointwise feed-forward, with a residual around the whole block."""

    def __init__(self, config, rng, dtype=np.float32):
        d = config.d_model
        self.ln = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, config.heads, rng, dtype)
        self.conv = DepthwiseConv1d(d, config.conv_kernel, rng,
                                    padding=(config.conv_kernel - 1) // 2, dtype=dtype)
        self.conv_act = PReLU(dtype)
        self.ff = FeedForward(d, config.ff_width, rng, dtype)

    def __call__(self, x):
        y = self.ln(x)
        branches = T.add(self.attn(y), self.conv_act(self.conv(y)))
        return T.add(x, self.ff(branches))


class SharedEncoder(Module):
    """Frontend + L blocks; exposes every layer's hidden states."""

    def __init__(self, config, rng, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        self.frontend = Frontend(config.d_model, rng, dtype)
        self.blocks = [EncoderBlock(config, rng, dtype) for _ in range(config.layers)]

    def encode_layers(self, wave):
        """Return [H_1 .. H_L], each [T_enc, D]."""
        h = self.frontend(wave)
        if h.shape[0] < 1:
            raise ShapeError("encoder", "input collapses to zero frames after subsampling")
        if self.config.positions:
            pos = sinusoidal_positions(h.shape[0], self.config.d_model, self.dtype)
            h = T.add(h, T.constant(pos))
        layers = []
        for block in self.blocks:
            h = block(h)
            layers.append(h)
        return layers


def weighted_sum(layers, logits):
    """Softmax-normalized combination of layer outputs along the layer axis."""
    if logits.shape != (len(layers),):
        raise ShapeError("weighted_sum", f"need {len(layers)} logits, got shape {logits.shape}")
    w = T.softmax(logits, axis=-1)
    out = T.mul(layers[0], w[0])
    for l in range(1, len(layers)):
        out = T.add(out, T.mul(layers[l], w[l]))
    return out


def rwse(h_ws, h_last):
    """Residual fusion: weighted sum plus the last layer, elementwise."""
    if h_ws.shape != h_last.shape:
        raise ShapeError("rwse", f"shape mismatch {h_ws.shape} vs {h_last.shape}")
    return T.add(h_ws, h_last)


class TaskFusion(Module):
    """Per-task fusion of encoder layers.

    Parameter names embed the fusion mode (e.g. ``rwse.diar_logits``) so
    checkpoints from different ablation modes are structurally distinct.
    """

    def __init__(self, mode, num_layers, dtype=np.float32):
        if mode not in FUSION_MODES:
            raise ConfigError("train.fusion_mode", f"unknown mode {mode!r}")
        self.mode = mode
        self.num_layers = num_layers
        if mode != "none":
            for task in TASKS:
                self.__dict__[f"{mode}.{task}_logits"] = Parameter(
                    np.zeros(num_layers, dtype=dtype))

    def logits(self, task):
        return self.__dict__[f"{self.mode}.{task}_logits"]

    def fuse(self, layers):
        """task -> fused representation [T_enc, D]."""
        if self.mode == "none":
            return {task: layers[-1] for task in TASKS}
        fused = {}
        for task in TASKS:
            h_ws = weighted_sum(layers, self.logits(task).tensor)
            fused[task] = rwse(h_ws, layers[-1]) if self.mode == "rwse" else h_ws
        return fused

    def layer_weights(self):
        """task -> softmax weights as a plain array (for reports and figures)."""
        if self.mode == "none":
            one_hot = np.zeros(self.num_layers)
            one_hot[-1] = 1.0
            return {task: one_hot.copy() for task in TASKS}
        out = {}
        for task in TASKS:
            z = self.logits(task).data.astype(np.float64)
            e = np.exp(z - z.max())
            out[task] = e / e.sum()
        return out
