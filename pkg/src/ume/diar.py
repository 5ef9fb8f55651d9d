"""Frame-level speaker-activity head with permutation-invariant BCE training."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import Linear, Module

MAX_SPEAKERS = 4


@dataclass
class DiarOutput:
    logits: T.Tensor            # [T_enc, C], pre-sigmoid
    probs: T.Tensor             # [T_enc, C], in (0, 1)


class DiarHead(Module):
    """Linear map from fused encoder frames to per-speaker activity logits."""

    def __init__(self, d_model, num_speakers, rng, dtype=np.float32):
        self.proj = Linear(d_model, num_speakers, rng, dtype)

    def __call__(self, h_enc):
        logits = self.proj(h_enc)
        return DiarOutput(logits=logits, probs=T.sigmoid(logits))


def frame_labels_from_spans(spans, total_samples, num_frames):
    """Sample-level activity spans -> frame-level binary labels [T_enc, C].

    Frame boundaries split [0, total_samples) proportionally; a frame is
    active when more than half of its samples fall inside a span.
    """
    c = len(spans)
    labels = np.zeros((num_frames, c), dtype=np.float64)
    edges = np.round(np.arange(num_frames + 1) * (total_samples / num_frames)).astype(int)
    for speaker, speaker_spans in enumerate(spans):
        for start, end in speaker_spans:
            for f in range(num_frames):
                lo, hi = edges[f], edges[f + 1]
                covered = min(hi, end) - max(lo, start)
                if hi > lo and covered * 2 > (hi - lo):
                    labels[f, speaker] = 1.0
    return labels


def _pairwise_bce(logits, labels):
    """Mean-over-frames BCE between every predicted channel and every
    reference channel, computed from logits in the stable softplus form."""
    t, c = logits.shape
    losses = [[None] * c for _ in range(c)]
    for pred in range(c):
        x = logits[:, pred]
        sp = T.softplus(x)
        for ref in range(c):
            y = T.constant(labels[:, ref].astype(logits.dtype))
            losses[pred][ref] = T.tmean(T.sub(sp, T.mul(x, y)))
    return losses


def pit_bce_loss(logits, labels):
    """Best-permutation binary cross entropy.

    Returns (scalar loss Tensor, best permutation) where ``perm[c]`` is the
    reference channel assigned to predicted channel ``c``. The minimum is
    over all C! assignments; ties break to the lexicographically smallest
    permutation, and gradient only flows through the winning assignment.
    """
    if logits.ndim != 2:
        raise ShapeError("pit_bce_loss", f"logits must be [T, C], got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != logits.shape:
        raise ShapeError("pit_bce_loss", f"labels {labels.shape} != logits {logits.shape}")
    c = logits.shape[1]
    if c > MAX_SPEAKERS:
        raise ShapeError("pit_bce_loss", f"at most {MAX_SPEAKERS} speakers supported, got {c}")
    if not np.isin(labels, (0, 1)).all():
        raise ShapeError("pit_bce_loss", "labels must be binary")

    losses = _pairwise_bce(logits, labels)
    values = np.array([[float(l.data) for l in row] for row in losses])
    best_perm, best_value = None, None
    for perm in permutations(range(c)):
        total = values[range(c), perm].sum()
        if best_value is None or total < best_value:
            best_perm, best_value = perm, total
    loss = losses[0][best_perm[0]]
    for pred in range(1, c):
        loss = T.add(loss, losses[pred][best_perm[pred]])
    return loss, best_perm


def probs_to_segments(probs, threshold=0.5, median_frames=1):
    """Threshold + median-filter probabilities into per-speaker frame segments."""
    from .metrics import median_filter
    probs = np.asarray(probs)
    segments = []
    for c in range(probs.shape[1]):
        decisions = median_filter((probs[:, c] > threshold).astype(np.int8), median_frames)
        spans = []
        start = None
        for f, active in enumerate(decisions):
            if active and start is None:
                start = f
            elif not active and start is not None:
                spans.append((start, f))
                start = None
        if start is not None:
            spans.append((start, len(decisions)))
        segments.append(spans)
    return segments
