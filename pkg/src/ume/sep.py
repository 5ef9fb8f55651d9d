"""Time-domain separation head: learned analysis filterbank, dilated TCN
separator over features concatenated with upsampled encoder representations,
sigmoid masks, and a transposed-convolution synthesis decoder."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import (ConvTranspose1d, Conv1d, DepthwiseConv1d, LayerNorm, Linear, Module,
                 PReLU)

MAX_SPEAKERS = 4
SI_SDR_EPS = 1e-8
LOG10 = math.log(10.0)


@dataclass
class SepConfig:
    kernel: int = 16
    stride: int = 8
    filters: int = 32
    bottleneck: int = 48
    tcn_blocks: int = 2
    tcn_layers: int = 4
    tcn_kernel: int = 3
    use_enc_features: bool = True     # False gives the separation-only baseline width

    def validate(self, path="model.sep"):
        if self.stride > self.kernel:
            raise ConfigError(f"{path}.stride", f"stride {self.stride} exceeds kernel "
                                                f"{self.kernel}")
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError(f"{path}.kernel", "kernel and stride must be >= 1")
        if self.tcn_kernel < 1 or self.tcn_kernel % 2 == 0:
            raise ConfigError(f"{path}.tcn_kernel", "must be a positive odd integer")
        if min(self.filters, self.bottleneck, self.tcn_blocks, self.tcn_layers) < 1:
            raise ConfigError(f"{path}", "filters/bottleneck/tcn sizes must be >= 1")
        return self

    def dilations(self):
        return [2 ** i for i in range(self.tcn_layers)] * self.tcn_blocks

    def feature_width(self, d_enc):
        return self.filters + (d_enc if self.use_enc_features else 0)


def receptive_field(config):
    """Frames seen by one output frame of the TCN (one k-tap conv per layer)."""
    return 1 + sum((config.tcn_kernel - 1) * d for d in config.dilations())


def upsample_factor(t_sep, t_enc):
    """Round-half-up repetition factor aligning encoder frames to the
    separation frame rate, floored at 1."""
    return max(1, int(math.floor(t_sep / t_enc + 0.5)))


class TcnLayer(Module):
    """Residual bottleneck layer with one dilated depthwise convolution."""

    def __init__(self, width, kernel, dilation, rng, dtype=np.float32):
        self.inner = Linear(width, width, rng, dtype)
        self.act1 = PReLU(dtype)
        self.dconv = DepthwiseConv1d(width, kernel, rng, dilation=dilation,
                                     padding=(kernel - 1) // 2 * dilation, dtype=dtype)
        self.act2 = PReLU(dtype)
        self.outer = Linear(width, width, rng, dtype)

    def __call__(self, x):
        h = self.act1(self.inner(x))
        h = self.act2(self.dconv(h))
        return T.add(x, self.outer(h))


class SepHead(Module):
    def __init__(self, config, d_enc, num_speakers, rng, dtype=np.float32):
        config.validate()
        self.config = config
        self.num_speakers = num_speakers
        self.d_feat = config.feature_width(d_enc)
        self.analysis = Conv1d(1, config.filters, config.kernel, rng,
                               stride=config.stride, bias=False, dtype=dtype)
        self.norm = LayerNorm(self.d_feat, dtype)
        self.bottleneck_proj = Linear(self.d_feat, config.bottleneck, rng, dtype)
        self.tcn = [TcnLayer(config.bottleneck, config.tcn_kernel, d, rng, dtype)
                    for d in config.dilations()]
        self.mask_act = PReLU(dtype)
        self.mask_proj = Linear(config.bottleneck, num_speakers * self.d_feat, rng, dtype)
        self.decoder = ConvTranspose1d(self.d_feat, 1, config.kernel, rng,
                                       stride=config.stride, dtype=dtype)

    def conv_encode(self, wave):
        """Waveform [T] -> analysis features [T_sep, filters] (ReLU, bias-free)."""
        if wave.shape[0] < self.config.kernel:
            raise ShapeError("sep.conv_encode", f"input length {wave.shape[0]} shorter "
                                                f"than the analysis kernel {self.config.kernel}")
        return T.relu(self.analysis(T.reshape(wave, (wave.shape[0], 1))))

    def concat_upsample(self, h_sep, h_enc):
        """Repeat encoder frames to the separation frame rate, fit to T_sep,
        and concatenate along the feature axis."""
        if not self.config.use_enc_features:
            return h_sep
        t_sep, t_enc = h_sep.shape[0], h_enc.shape[0]
        factor = upsample_factor(t_sep, t_enc)
        up = T.upsample_repeat(h_enc, factor, axis=0) if factor > 1 else h_enc
        if up.shape[0] > t_sep:
            up = up[:t_sep]
        elif up.shape[0] < t_sep:
            last = up[up.shape[0] - 1:up.shape[0]]
            pad = T.upsample_repeat(last, t_sep - up.shape[0], axis=0)
            up = T.concat([up, pad], axis=0)
        return T.concat([h_sep, up], axis=-1)

    def separate(self, h_concat):
        """Feature sequence [T_sep, D_sep] -> per-speaker sigmoid masks."""
        e = self.bottleneck_proj(self.norm(h_concat))
        for layer in self.tcn:
            e = layer(e)
        raw = self.mask_proj(self.mask_act(e))                  # [T_sep, C*D_sep]
        t_sep = raw.shape[0]
        stacked = T.reshape(raw, (t_sep, self.num_speakers, self.d_feat))
        return [T.sigmoid(stacked[:, c, :]) for c in range(self.num_speakers)]

    def reconstruct(self, h_concat, masks, length):
        """Masked features -> time-domain estimates, trimmed/padded to ``length``."""
        estimates = []
        for mask in masks:
            if mask.shape != h_concat.shape:
                raise ShapeError("sep.reconstruct", f"mask {mask.shape} does not match "
                                                    f"features {h_concat.shape}")
            masked = T.mul(h_concat, mask)
            wave = T.reshape(self.decoder(masked), (-1,))
            if wave.shape[0] > length:
                wave = wave[:length]
            elif wave.shape[0] < length:
                pad = T.constant(np.zeros(length - wave.shape[0], dtype=wave.dtype))
                wave = T.concat([wave, pad], axis=0)
            estimates.append(wave)
        return estimates

    def __call__(self, wave, h_enc):
        h_sep = self.conv_encode(wave)
        h_concat = self.concat_upsample(h_sep, h_enc)
        masks = self.separate(h_concat)
        return self.reconstruct(h_concat, masks, wave.shape[0]), masks


def si_sdr_value(estimate, reference, eps=SI_SDR_EPS):
    """Scale-invariant SDR (dB) of a Tensor estimate against a numpy reference.

    Both signals are zero-meaned; the reference is projected onto the
    estimate and the energy ratio is epsilon-guarded on both sides.
    """
    ref = np.asarray(reference, dtype=np.float64)
    if not ref.any():
        raise ShapeError("si_sdr", "all-zero reference: projection undefined")
    ref = ref - ref.mean()
    ref_t = T.constant(ref.astype(estimate.dtype))
    est = T.sub(estimate, T.tmean(estimate))
    alpha = T.mul(T.tsum(T.mul(est, ref_t)), 1.0 / (float(ref @ ref) + eps))
    proj = T.mul(ref_t, alpha)
    err = T.sub(est, proj)
    num = T.add(T.tsum(T.mul(proj, proj)), eps)
    den = T.add(T.tsum(T.mul(err, err)), eps)
    return T.mul(T.log(T.div(num, den)), 10.0 / LOG10)


def si_sdr_pit_loss(estimates, references, eps=SI_SDR_EPS):
    """Negative SI-SDR summed over sources, minimized over assignments.

    Returns (scalar loss Tensor, best permutation); ``perm[c]`` is the
    reference assigned to estimate ``c``. Ties break lexicographically.
    """
    c = len(estimates)
    if c != len(references):
        raise ShapeError("si_sdr_pit_loss", f"{c} estimates vs {len(references)} references")
    if c > MAX_SPEAKERS:
        raise ShapeError("si_sdr_pit_loss", f"at most {MAX_SPEAKERS} sources supported")
    table = [[si_sdr_value(est, ref, eps) for ref in references] for est in estimates]
    values = np.array([[float(v.data) for v in row] for row in table])
    best_perm, best_value = None, None
    for perm in permutations(range(c)):
        total = -values[range(c), perm].sum()
        if best_value is None or total < best_value:
            best_perm, best_value = perm, total
    loss = T.mul(table[0][best_perm[0]], -1.0)
    for i in range(1, c):
        loss = T.sub(loss, table[i][best_perm[i]])
    return loss, best_perm
