"""Multi-speaker recognition head.

Per speaker, an independent strided-conv + transformer branch refines the
fused encoder representation; a shared CTC projection and a shared
attention decoder produce two losses. The reference-to-branch assignment is
chosen by the CTC loss alone (optionally by the combined loss) and the
combined objective is evaluated under that fixed assignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from . import tensor as T
from .errors import ConfigError, CtcInfeasibleError, ItemSkippedError, ShapeError
from .nn import Conv1d, DecoderBlock, Embedding, LayerNorm, Linear, Module, \
    TransformerBlock, sinusoidal_positions
from .tensor import Tensor, _result

MAX_SPEAKERS = 4
BLANK = 0


@dataclass
class AsrConfig:
    d_model: int = 32
    heads: int = 2
    speaker_blocks: int = 2
    decoder_blocks: int = 2
    ff_width: int = 64
    lambda_ctc: float = 0.2
    select_by: str = "ctc"            # "ctc" | "combined" permutation selection

    def validate(self, path="model.asr"):
        if not 0.0 <= self.lambda_ctc <= 1.0:
            raise ConfigError(f"{path}.lambda_ctc", f"must be in [0, 1], got {self.lambda_ctc}")
        if self.d_model % self.heads:
            raise ConfigError(f"{path}.d_model",
                              f"{self.d_model} not divisible by heads {self.heads}")
        if self.select_by not in ("ctc", "combined"):
            raise ConfigError(f"{path}.select_by", f"unknown mode {self.select_by!r}")
        return self


@dataclass
class Hypothesis:
    tokens: list = field(default_factory=list)    # blank/sos/eos-free ids
    scores: list = field(default_factory=list)    # per-token best frame log-prob


def sos_id(vocab_size):
    return vocab_size + 1


def eos_id(vocab_size):
    return vocab_size + 2


class SpeakerBranch(Module):
    """Stride-4 conv subsampler plus transformer blocks, private per speaker."""

    def __init__(self, d_enc, config, rng, dtype=np.float32):
        self.subsample = Conv1d(d_enc, config.d_model, 4, rng, stride=4, dtype=dtype)
        self.blocks = [TransformerBlock(config.d_model, config.heads, config.ff_width,
                                        rng, dtype) for _ in range(config.speaker_blocks)]

    def __call__(self, h_enc):
        if h_enc.shape[0] < 4:
            raise ShapeError("asr.speaker_encode", f"{h_enc.shape[0]} encoder frames "
                                                   f"subsample to zero recognition frames")
        h = self.subsample(h_enc)
        for block in self.blocks:
            h = block(h)
        return h


def ctc_required_frames(target):
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(log_probs, target, blank=BLANK):
    """Negative log-probability of all blank-augmented alignments of ``target``.

    ``log_probs`` is a [T, num_classes] Tensor of per-frame log-probabilities
    (class ``blank`` included). The forward DP runs in float64 log space;
    the backward pass is the standard alpha-beta symbol posterior.
    """
    if log_probs.ndim != 2:
        raise ShapeError("ctc_loss", f"log_probs must be [T, classes], got {log_probs.shape}")
    t_frames, n_classes = log_probs.shape
    if t_frames < 1:
        raise ShapeError("ctc_loss", "empty log_probs")
    target = [int(u) for u in target]
    if any(u <= blank or u >= n_classes for u in target):
        raise ShapeError("ctc_loss", f"target ids must be in (blank, {n_classes}), got {target}")
    if ctc_required_frames(target) > t_frames:
        raise CtcInfeasibleError(f"target of length {len(target)} with repeats needs "
                                 f"{ctc_required_frames(target)} frames, have {t_frames}")

    ext = [blank]
    for u in target:
        ext.extend((u, blank))
    s_len = len(ext)
    lp = log_probs.data.astype(np.float64)

    alpha = np.full((t_frames, s_len), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_frames):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([-np.inf], prev[:-1]))
        acc = np.logaddexp(stay, step)
        if s_len > 2:
            skip = np.concatenate(([-np.inf, -np.inf], prev[:-2]))
            allowed = np.array([s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]
                                for s in range(s_len)])
            acc = np.where(allowed, np.logaddexp(acc, skip), acc)
        alpha[t] = acc + lp[t, ext]
    if s_len > 1:
        log_z = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        log_z = alpha[-1, -1]

    def backward(g):
        beta = np.full((t_frames, s_len), -np.inf)
        beta[-1, -1] = 0.0
        if s_len > 1:
            beta[-1, -2] = 0.0
        for t in range(t_frames - 2, -1, -1):
            nxt = beta[t + 1] + lp[t + 1, ext]
            stay = nxt
            step = np.concatenate((nxt[1:], [-np.inf]))
            acc = np.logaddexp(stay, step)
            if s_len > 2:
                skip = np.concatenate((nxt[2:], [-np.inf, -np.inf]))
                allowed = np.array([s + 2 < s_len and ext[s + 2] != blank
                                    and ext[s + 2] != ext[s] for s in range(s_len)])
                acc = np.where(allowed, np.logaddexp(acc, skip), acc)
            beta[t] = acc
        grad = np.zeros_like(lp)
        post = np.exp(alpha + beta - log_z)          # [T, S] state posteriors
        for s, label in enumerate(ext):
            grad[:, label] += post[:, s]
        from .tensor import _accumulate
        _accumulate(log_probs, (-grad * float(g)).astype(log_probs.dtype))

    value = np.asarray(-log_z, dtype=log_probs.dtype)
    return _result(value, (log_probs,), backward, "ctc")


class AsrHead(Module):
    def __init__(self, config, d_enc, num_speakers, vocab_size, rng, dtype=np.float32):
        config.validate()
        self.config = config
        self.vocab_size = vocab_size
        self.num_speakers = num_speakers
        self.dtype = dtype
        self.branches = [SpeakerBranch(d_enc, config, rng, dtype)
                         for _ in range(num_speakers)]
        self.ctc_proj = Linear(config.d_model, vocab_size + 1, rng, dtype)
        self.embed = Embedding(vocab_size + 2, config.d_model, rng, dtype)  # ids 0..sos
        self.dec_blocks = [DecoderBlock(config.d_model, config.heads, config.ff_width,
                                        rng, dtype) for _ in range(config.decoder_blocks)]
        self.dec_norm = LayerNorm(config.d_model, dtype)
        self.out_proj = Linear(config.d_model, vocab_size + 1, rng, dtype)  # tokens + eos

    def speaker_encode(self, h_enc):
        """Fused encoder frames -> one representation per speaker branch."""
        return [branch(h_enc) for branch in self.branches]

    def ctc_log_probs(self, h_asr):
        return T.log_softmax(self.ctc_proj(h_asr), axis=-1)

    def _decode_logits(self, h_asr, input_ids):
        x = self.embed(input_ids)
        pos = sinusoidal_positions(len(input_ids), self.config.d_model, self.dtype)
        x = T.add(x, T.constant(pos))
        for block in self.dec_blocks:
            x = block(x, h_asr)
        return self.out_proj(self.dec_norm(x))

    def attention_decode_loss(self, h_asr, target):
        """Teacher-forced cross entropy of [sos, target] -> [target, eos],
        averaged over output positions. Output classes are the tokens
        (shifted down by one) plus an end-of-sequence class."""
        target = [int(u) for u in target]
        if not target:
            raise ShapeError("attention_decode_loss", "empty target")
        v = self.vocab_size
        input_ids = [sos_id(v)] + target
        gold = [u - 1 for u in target] + [v]          # eos occupies the last class
        logits = self._decode_logits(h_asr, input_ids)
        logp = T.log_softmax(logits, axis=-1)
        one_hot = np.zeros((len(gold), v + 1), dtype=self.dtype)
        one_hot[np.arange(len(gold)), gold] = 1.0
        picked = T.tsum(T.mul(logp, T.constant(one_hot)), axis=-1)
        return T.mul(T.tmean(picked), -1.0)

    def asr_pit_loss(self, speaker_reps, targets):
        """Permutation-invariant CTC/attention loss over speaker branches.

        The assignment (``perm[c]`` = reference for branch ``c``) minimizes
        the summed CTC loss (or the combined loss when configured); the
        returned scalar is sum_c [lambda*ctc + (1-lambda)*attention] under
        that assignment. Raises ``ItemSkippedError`` when no assignment is
        CTC-feasible.
        """
        c = len(speaker_reps)
        if c != len(targets):
            raise ShapeError("asr_pit_loss", f"{c} branches vs {len(targets)} targets")
        if c > MAX_SPEAKERS:
            raise ShapeError("asr_pit_loss", f"at most {MAX_SPEAKERS} speakers supported")
        lam = self.config.lambda_ctc
        log_probs = [self.ctc_log_probs(rep) for rep in speaker_reps]
        ctc_table = [[None] * c for _ in range(c)]
        for pred in range(c):
            for ref in range(c):
                try:
                    ctc_table[pred][ref] = ctc_loss(log_probs[pred], targets[ref])
                except CtcInfeasibleError:
                    ctc_table[pred][ref] = None

        att_cache = {}

        def att(pred, ref):
            if (pred, ref) not in att_cache:
                att_cache[(pred, ref)] = self.attention_decode_loss(
                    speaker_reps[pred], targets[ref])
            return att_cache[(pred, ref)]

        best_perm, best_key = None, None
        for perm in permutations(range(c)):
            if any(ctc_table[pred][perm[pred]] is None for pred in range(c)):
                continue
            key = sum(float(ctc_table[pred][perm[pred]].data) for pred in range(c))
            if self.config.select_by == "combined":
                key = sum(lam * float(ctc_table[pred][perm[pred]].data)
                          + (1 - lam) * float(att(pred, perm[pred]).data)
                          for pred in range(c))
            if best_key is None or key < best_key:
                best_perm, best_key = perm, key
        if best_perm is None:
            raise ItemSkippedError("no CTC-feasible assignment for this item")

        loss = None
        for pred in range(c):
            term = T.add(T.mul(ctc_table[pred][best_perm[pred]], lam),
                         T.mul(att(pred, best_perm[pred]), 1.0 - lam))
            loss = term if loss is None else T.add(loss, term)
        return loss, best_perm

    def greedy_decode(self, h_asr):
        """Best-path CTC decoding: per-frame argmax, collapse repeats, drop blanks."""
        logp = self.ctc_log_probs(h_asr).data
        return greedy_collapse(logp)


def greedy_collapse(log_probs, blank=BLANK):
    """Collapse a per-frame argmax path into a Hypothesis."""
    log_probs = np.asarray(log_probs)
    path = log_probs.argmax(axis=-1)
    tokens, scores = [], []
    prev = None
    for frame, cls in enumerate(path):
        if cls != blank and cls != prev:
            tokens.append(int(cls))
            scores.append(float(log_probs[frame, cls]))
        elif cls != blank and cls == prev:
            scores[-1] = max(scores[-1], float(log_probs[frame, cls]))
        prev = cls
    return Hypothesis(tokens=tokens, scores=scores)
