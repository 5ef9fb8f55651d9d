"""Evaluation metrics and report serialization.

Diarization error rate is scored at frame resolution: threshold, per-speaker
median filtering, exhaustive speaker mapping, then collar exclusion around
reference segment boundaries. Errors are only counted on scored frames while
the denominator stays the full reference speech, so widening the collar can
never increase the DER.

The SDR here is the plain energy ratio 10*log10(||s||^2 / ||s_hat - s||^2)
(epsilon-guarded), not the filtered BSS-eval variant; numbers are not
comparable with BSS-eval toolchains.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .errors import MetricsError

EPS = 1e-8
SENTINEL_DB = 60.0          # values at or above this are reported as +inf
MAX_SPEAKERS = 4


# ---------------------------------------------------------------------------
# diarization error rate
# ---------------------------------------------------------------------------

@dataclass
class DerBreakdown:
    miss_s: float
    false_alarm_s: float
    confusion_s: float
    total_ref_s: float          # full reference speech, not collar-reduced
    speaker_map: tuple

    @property
    def der(self):
        if self.total_ref_s == 0:
            raise MetricsError("DER undefined: no reference speech")
        return (self.miss_s + self.false_alarm_s + self.confusion_s) / self.total_ref_s


def median_filter(binary, width):
    """Majority vote over a centered window with edge padding; width 1 is identity."""
    if width % 2 == 0 or width < 1:
        raise MetricsError(f"median filter width must be odd and positive, got {width}")
    if width == 1:
        return np.asarray(binary).copy()
    arr = np.asarray(binary, dtype=np.int32)
    half = width // 2
    padded = np.pad(arr, half, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, width)
    return (windows.sum(axis=-1) * 2 > width).astype(arr.dtype)


def spans_to_frames(ref_spans_s, num_frames, frame_s):
    """Per-speaker second spans -> [T, C] binary frames (active if covered > 50%)."""
    c = len(ref_spans_s)
    frames = np.zeros((num_frames, c), dtype=np.int8)
    for speaker, spans in enumerate(ref_spans_s):
        for start, end in spans:
            for f in range(num_frames):
                lo, hi = f * frame_s, (f + 1) * frame_s
                covered = min(hi, end) - max(lo, start)
                if covered * 2 > frame_s:
                    frames[f, speaker] = 1
    return frames


def _frame_errors(ref, hyp):
    """Per-frame miss / false alarm / confusion counts after speaker mapping."""
    n_ref = ref.sum(axis=1)
    n_hyp = hyp.sum(axis=1)
    correct = (ref & hyp).sum(axis=1)
    miss = np.maximum(0, n_ref - n_hyp)
    fa = np.maximum(0, n_hyp - n_ref)
    confusion = np.minimum(n_ref, n_hyp) - correct
    return miss, fa, confusion


def der(pred_probs, ref_spans_s, collar_s=0.0, median_frames=1, threshold=0.5,
        frame_s=None):
    """Diarization error rate with collar tolerance and median filtering.

    ``pred_probs`` is [T, C]; ``ref_spans_s`` is a per-speaker list of
    (onset_s, offset_s) reference segments; ``frame_s`` is the frame duration
    in seconds.
    """
    pred_probs = np.asarray(pred_probs)
    if frame_s is None or frame_s <= 0:
        raise MetricsError(f"frame_s must be positive, got {frame_s}")
    if pred_probs.ndim != 2:
        raise MetricsError(f"pred_probs must be [T, C], got shape {pred_probs.shape}")
    t, c = pred_probs.shape
    if c > MAX_SPEAKERS:
        raise MetricsError(f"at most {MAX_SPEAKERS} speakers supported, got {c}")
    if len(ref_spans_s) != c:
        raise MetricsError(f"{len(ref_spans_s)} reference speakers vs {c} predicted")

    hyp = (pred_probs > threshold).astype(np.int8)
    hyp = np.stack([median_filter(hyp[:, ch], median_frames) for ch in range(c)], axis=1)
    ref = spans_to_frames(ref_spans_s, t, frame_s)

    best_perm, best_total = None, None
    for perm in permutations(range(c)):
        miss, fa, confusion = _frame_errors(ref, hyp[:, perm])
        total = int(miss.sum() + fa.sum() + confusion.sum())
        if best_total is None or total < best_total:
            best_perm, best_total = perm, total
    hyp = hyp[:, best_perm]

    centers = (np.arange(t) + 0.5) * frame_s
    scored = np.ones(t, dtype=bool)
    if collar_s > 0:
        for spans in ref_spans_s:
            for start, end in spans:
                for boundary in (start, end):
                    scored &= ~((centers >= boundary - collar_s)
                                & (centers <= boundary + collar_s))

    miss, fa, confusion = _frame_errors(ref, hyp)
    return DerBreakdown(
        miss_s=float(miss[scored].sum() * frame_s),
        false_alarm_s=float(fa[scored].sum() * frame_s),
        confusion_s=float(confusion[scored].sum() * frame_s),
        total_ref_s=float(ref.sum() * frame_s),
        speaker_map=best_perm,
    )


# ---------------------------------------------------------------------------
# separation metrics
# ---------------------------------------------------------------------------

def si_snr_metric(estimate, reference, eps=EPS):
    """Scale-invariant SNR in dB (zero-mean, projection form, eps-guarded)."""
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if not ref.any():
        raise MetricsError("all-zero reference: SI-SNR undefined")
    est = est - est.mean()
    ref = ref - ref.mean()
    alpha = float(est @ ref) / (float(ref @ ref) + eps)
    proj = alpha * ref
    err = est - proj
    num = float(proj @ proj) + eps
    den = float(err @ err) + eps
    return 10.0 * math.log10(num / den)


def sdr_metric(estimate, reference, eps=EPS):
    """Unfiltered energy-ratio SDR in dB; exact reconstruction gives +inf."""
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if not ref.any():
        raise MetricsError("all-zero reference: SDR undefined")
    err = est - ref
    err_energy = float(err @ err)
    if err_energy == 0.0:
        return math.inf
    return 10.0 * math.log10((float(ref @ ref) + eps) / (err_energy + eps))


def cap_to_sentinel(value_db):
    """Values at or beyond the epsilon ceiling are reported as +inf."""
    return math.inf if value_db >= SENTINEL_DB else value_db


def best_separation_perm(estimates, references):
    """Assignment (perm[c] = reference for estimate c) maximizing total SI-SNR."""
    c = len(estimates)
    table = np.array([[si_snr_metric(est, ref) for ref in references]
                      for est in estimates])
    best_perm, best_total = None, None
    for perm in permutations(range(c)):
        total = table[range(c), perm].sum()
        if best_total is None or total > best_total:
            best_perm, best_total = perm, total
    return best_perm


# ---------------------------------------------------------------------------
# permutation-optimal token error rate
# ---------------------------------------------------------------------------

@dataclass
class WerBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    ref_tokens: int
    assignment: tuple           # assignment[h] = reference paired with hypothesis h

    @property
    def wer(self):
        if self.ref_tokens == 0:
            raise MetricsError("WER undefined: empty references")
        return (self.substitutions + self.deletions + self.insertions) / self.ref_tokens


def levenshtein_counts(ref, hyp):
    """Unit-cost edit distance returning (substitutions, deletions, insertions).

    Ties prefer diagonal moves, then deletions, so counts are deterministic.
    """
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int32)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = ref[i - 1] == hyp[j - 1]
            dist[i, j] = min(dist[i - 1, j - 1] + (0 if same else 1),
                             dist[i - 1, j] + 1,
                             dist[i, j - 1] + 1)
    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (
                0 if ref[i - 1] == hyp[j - 1] else 1):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return subs, dels, ins


def wer_optimal_perm(hyps, refs):
    """Token error rate under the hypothesis-to-reference bijection that
    minimizes total edit errors (exhaustive over C <= 4 speakers)."""
    c = len(refs)
    if len(hyps) != c:
        raise MetricsError(f"{len(hyps)} hypotheses vs {c} references")
    if c > MAX_SPEAKERS:
        raise MetricsError(f"at most {MAX_SPEAKERS} speakers supported, got {c}")
    ref_tokens = sum(len(r) for r in refs)
    if ref_tokens == 0:
        raise MetricsError("WER undefined: all references are empty")
    table = [[levenshtein_counts(refs[r], hyps[h]) for r in range(c)] for h in range(c)]
    best_perm, best_total = None, None
    for perm in permutations(range(c)):
        total = sum(sum(table[h][perm[h]]) for h in range(c))
        if best_total is None or total < best_total:
            best_perm, best_total = perm, total
    subs = sum(table[h][best_perm[h]][0] for h in range(c))
    dels = sum(table[h][best_perm[h]][1] for h in range(c))
    ins = sum(table[h][best_perm[h]][2] for h in range(c))
    return WerBreakdown(substitutions=subs, deletions=dels, insertions=ins,
                        ref_tokens=ref_tokens, assignment=best_perm)


# ---------------------------------------------------------------------------
# RTTM
# ---------------------------------------------------------------------------

def rttm_lines(file_id, segments_s):
    """Per-speaker (onset_s, duration_s) segments -> RTTM SPEAKER lines."""
    lines = []
    for c, segments in enumerate(segments_s, start=1):
        for onset, duration in segments:
            lines.append(f"SPEAKER {file_id} 1 {onset:.3f} {duration:.3f} "
                         f"<NA> <NA> spk{c} <NA> <NA>")
    return lines


def write_rttm(path, file_id, segments_s):
    with open(path, "w", encoding="utf-8") as f:
        for line in rttm_lines(file_id, segments_s):
            f.write(line + "\n")
    return path


def read_rttm(path):
    """RTTM -> {file_id: {speaker: [(onset_s, offset_s), ...]}}."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if fields[0] != "SPEAKER" or len(fields) < 8:
                raise MetricsError(f"{path}:{lineno}: not an RTTM SPEAKER line")
            file_id, onset, duration, speaker = fields[1], fields[3], fields[4], fields[7]
            spans = out.setdefault(file_id, {}).setdefault(speaker, [])
            spans.append((float(onset), float(onset) + float(duration)))
    return out


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def write_report_json(path, report):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)       # +inf serialized as Infinity
        f.write("\n")
    return path


def write_report_csv(path, report):
    """Flatten the JSON report: one row per item plus one aggregate row."""
    items = report.get("per_item", [])
    columns = ["id"]
    for item in items:
        for key in item:
            if key != "id" and key not in columns:
                columns.append(key)
    for key in report.get("aggregate", {}):
        name = f"aggregate_{key}"
        if name not in columns:
            columns.append(name)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for item in items:
            writer.writerow([_csv_cell(item.get(col)) for col in columns])
        agg = {f"aggregate_{k}": v for k, v in report.get("aggregate", {}).items()}
        agg["id"] = "__aggregate__"
        writer.writerow([_csv_cell(agg.get(col)) for col in columns])
    return path


def _csv_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple, dict)):
        return json.dumps(value)
    return value
