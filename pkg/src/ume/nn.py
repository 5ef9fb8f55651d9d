"""Module system and the layer zoo used by the encoder and task heads."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .optim import Parameter


def glorot_uniform(shape, fan_in, fan_out, rng, dtype):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def sinusoidal_positions(length, dim, dtype=np.float32):
    """Classic fixed sin/cos position table, [length, dim]."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (i // 2) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


class Module:
    """Parameter container; children are discovered by attribute walk.

    Attributes that are Parameters, Modules, or lists of Modules are picked
    up automatically and named with dotted paths, which keys checkpoints and
    optimizer state.
    """

    def _children(self):
        for attr, value in self.__dict__.items():
            if isinstance(value, (Parameter, Module)):
                yield attr, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{attr}.{i}", item

    def named_parameters(self, prefix=""):
        for name, child in self._children():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(child, Parameter):
                child.name = path
                yield child
            else:
                yield from child.named_parameters(path)

    def parameters(self):
        return list(self.named_parameters())

    def zero_grad(self):
        for p in self.named_parameters():
            p.zero_grad()

    def state_arrays(self):
        """name -> value array, in deterministic walk order."""
        return {p.name: p.data for p in self.named_parameters()}


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype=np.float32, bias=True):
        self.weight = Parameter(glorot_uniform((d_in, d_out), d_in, d_out, rng, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight.tensor)
        if self.bias is not None:
            y = T.add(y, self.bias.tensor)
        return y


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.shift = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain.tensor, self.shift.tensor, eps=self.eps)


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, dilation=1,
                 dtype=np.float32, bias=True):
        fan_in, fan_out = kernel * c_in, kernel * c_out
        self.weight = Parameter(glorot_uniform((kernel, c_in, c_out), fan_in, fan_out, rng, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def __call__(self, x):
        return T.conv1d(x, self.weight.tensor,
                        bias=None if self.bias is None else self.bias.tensor,
                        stride=self.stride, padding=self.padding, dilation=self.dilation)


class DepthwiseConv1d(Module):
    def __init__(self, channels, kernel, rng, stride=1, padding=0, dilation=1, dtype=np.float32):
        self.weight = Parameter(glorot_uniform((kernel, channels), kernel, kernel, rng, dtype))
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def __call__(self, x):
        return T.dwconv1d(x, self.weight.tensor, stride=self.stride,
                          padding=self.padding, dilation=self.dilation)


class ConvTranspose1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, dtype=np.float32):
        fan_in, fan_out = kernel * c_in, kernel * c_out
        self.weight = Parameter(glorot_uniform((kernel, c_in, c_out), fan_in, fan_out, rng, dtype))
        self.stride = stride

    def __call__(self, x):
        return T.conv_transpose1d(x, self.weight.tensor, stride=self.stride)


class PReLU(Module):
    def __init__(self, dtype=np.float32, init=0.25):
        self.slope = Parameter(np.asarray(init, dtype=dtype))

    def __call__(self, x):
        return T.prelu(x, self.slope.tensor)


class MultiHeadAttention(Module):
    """Standard projected multi-head attention on [T, D] inputs."""

    def __init__(self, d_model, heads, rng, dtype=np.float32):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = Linear(d_model, d_model, rng, dtype)
        self.wk = Linear(d_model, d_model, rng, dtype)
        self.wv = Linear(d_model, d_model, rng, dtype)
        self.wo = Linear(d_model, d_model, rng, dtype)

    def _split(self, x):
        t = x.shape[0]
        return T.transpose(T.reshape(x, (t, self.heads, self.d_head)), (1, 0, 2))

    def __call__(self, x_q, x_kv=None, causal=False):
        x_kv = x_q if x_kv is None else x_kv
        q, k, v = self._split(self.wq(x_q)), self._split(self.wk(x_kv)), self._split(self.wv(x_kv))
        ctx = T.attention(q, k, v, causal=causal)                    # [H, T_q, d_head]
        t_q = x_q.shape[0]
        merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (t_q, self.heads * self.d_head))
        return self.wo(merged)


class FeedForward(Module):
    def __init__(self, d_model, width, rng, dtype=np.float32):
        self.lin1 = Linear(d_model, width, rng, dtype)
        self.lin2 = Linear(width, d_model, rng, dtype)

    def __call__(self, x):
        return self.lin2(T.relu(self.lin1(x)))


class TransformerBlock(Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, d_model, heads, ff_width, rng, dtype=np.float32):
        self.ln1 = LayerNorm(d_model, dtype)
        self.attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.ln2 = LayerNorm(d_model, dtype)
        self.ff = FeedForward(d_model, ff_width, rng, dtype)

    def __call__(self, x, causal=False):
        x = T.add(x, self.attn(self.ln1(x), causal=causal))
        return T.add(x, self.ff(self.ln2(x)))


class DecoderBlock(Module):
    """Pre-norm causal self-attention, cross-attention, feed-forward."""

    def __init__(self, d_model, heads, ff_width, rng, dtype=np.float32):
        self.ln1 = LayerNorm(d_model, dtype)
        self.self_attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.ln2 = LayerNorm(d_model, dtype)
        self.cross_attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.ln3 = LayerNorm(d_model, dtype)
        self.ff = FeedForward(d_model, ff_width, rng, dtype)

    def __call__(self, x, memory):
        x = T.add(x, self.self_attn(self.ln1(x), causal=True))
        x = T.add(x, self.cross_attn(self.ln2(x), memory))
        return T.add(x, self.ff(self.ln3(x)))


class Embedding(Module):
    def __init__(self, n_rows, dim, rng, dtype=np.float32):
        self.table = Parameter(glorot_uniform((n_rows, dim), n_rows, dim, rng, dtype))

    def __call__(self, ids):
        return T.embedding(self.table.tensor, ids)
