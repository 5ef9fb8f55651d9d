"""Dataset-level evaluation: runs the heads over a manifest and aggregates
diarization, separation, and recognition metrics into one report."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .diar import frame_labels_from_spans
from .metrics import (best_separation_perm, cap_to_sentinel, der, sdr_metric,
                      si_snr_metric, wer_optimal_perm)


def worker_count():
    """Worker cap from UME_THREADS (default 1)."""
    value = os.environ.get("UME_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def spans_to_seconds(spans, sample_rate):
    return [[(start / sample_rate, end / sample_rate) for start, end in speaker_spans]
            for speaker_spans in spans]


def _oracle_outputs(model, item, tasks):
    out = {}
    if "diar" in tasks:
        probe = model.forward_item(item.mixture, tasks=())
        t_enc = probe.fused["diar"].shape[0]
        labels = frame_labels_from_spans(item.activity, item.length, t_enc)
        out["diar_probs"] = np.where(labels > 0, 0.999, 0.001)
    if "sep" in tasks:
        out["estimates"] = [s.copy() for s in item.sources]
    if "asr" in tasks:
        from .asr import Hypothesis
        out["hypotheses"] = [Hypothesis(tokens=list(t), scores=[0.0] * len(t))
                             for t in item.transcripts]
    return out


def score_item(model, item, eval_cfg, oracle=False):
    """Metrics plus raw outputs for one item."""
    tasks = tuple(eval_cfg.tasks)
    outputs = (_oracle_outputs(model, item, tasks) if oracle
               else model.infer_item(item.mixture, tasks))
    sr = item.sample_rate
    row = {"id": item.id}
    extras = {"outputs": outputs}

    if "diar" in tasks:
        probs = outputs["diar_probs"]
        frame_s = item.length / probs.shape[0] / sr
        ref_spans = spans_to_seconds(item.activity, sr)
        for collar in eval_cfg.collars:
            breakdown = der(probs, ref_spans, collar_s=collar,
                            median_frames=eval_cfg.median_frames,
                            threshold=eval_cfg.threshold, frame_s=frame_s)
            row[f"der@{collar:g}"] = breakdown.der
            extras.setdefault("der", {})[collar] = breakdown
        row["der"] = row[f"der@{eval_cfg.collars[0]:g}"]
        extras["frame_s"] = frame_s

    if "sep" in tasks:
        estimates = outputs["estimates"]
        perm = best_separation_perm(estimates, item.sources)
        si_raw, sdr_raw, base_raw = [], [], []
        for c, est in enumerate(estimates):
            ref = item.sources[perm[c]]
            si_raw.append(si_snr_metric(est, ref))
            sdr_raw.append(sdr_metric(est, ref))
            base_raw.append(si_snr_metric(item.mixture, ref))
        row["si_snr"] = [cap_to_sentinel(v) for v in si_raw]
        row["sdr"] = cap_to_sentinel(float(np.mean(sdr_raw)))
        extras["si_snr_raw"] = si_raw
        extras["sdr_raw"] = sdr_raw
        extras["si_snr_baseline_raw"] = base_raw
        extras["sep_perm"] = perm

    if "asr" in tasks:
        hyps = [h.tokens for h in outputs["hypotheses"]]
        breakdown = wer_optimal_perm(hyps, item.transcripts)
        row["wer"] = breakdown.wer
        extras["wer"] = breakdown
        extras["hypotheses"] = hyps
    return row, extras


def evaluate(model, samples, eval_cfg, oracle=False, max_workers=None):
    """Score every sample; returns (report dict, per-item extras list)."""
    eval_cfg.validate()
    workers = max_workers or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(lambda s: score_item(model, s, eval_cfg, oracle),
                                   samples))
    else:
        scored = [score_item(model, s, eval_cfg, oracle) for s in samples]
    rows = [row for row, _ in scored]
    extras = [extra for _, extra in scored]

    aggregate = {}
    tasks = tuple(eval_cfg.tasks)
    if "diar" in tasks:
        for collar in eval_cfg.collars:
            err = sum(e["der"][collar].miss_s + e["der"][collar].false_alarm_s
                      + e["der"][collar].confusion_s for e in extras)
            ref = sum(e["der"][collar].total_ref_s for e in extras)
            aggregate[f"der@{collar:g}"] = err / ref
        aggregate["der"] = aggregate[f"der@{eval_cfg.collars[0]:g}"]
    if "sep" in tasks:
        si_all = [v for e in extras for v in e["si_snr_raw"]]
        base_all = [v for e in extras for v in e["si_snr_baseline_raw"]]
        sdr_all = [v for e in extras for v in e["sdr_raw"]]
        aggregate["si_snr"] = float(np.mean(si_all))
        aggregate["si_snri"] = float(np.mean(si_all) - np.mean(base_all))
        aggregate["sdr"] = float(np.mean(sdr_all))
    if "asr" in tasks:
        errors = sum(e["wer"].substitutions + e["wer"].deletions + e["wer"].insertions
                     for e in extras)
        tokens = sum(e["wer"].ref_tokens for e in extras)
        aggregate["wer"] = errors / tokens

    report = {
        "per_item": rows,
        "aggregate": aggregate,
        "meta": {
            "tasks": list(tasks),
            "collars": list(eval_cfg.collars),
            "median_frames": eval_cfg.median_frames,
            "num_items": len(samples),
            "oracle": bool(oracle),
            "sdr_variant": "unfiltered energy ratio (not BSS-eval comparable)",
            "inf_sentinel_db": 60.0,
        },
    }
    return report, extras
