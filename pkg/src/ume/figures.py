"""Matplotlib figures rendered next to the delimited reports."""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

STYLE = {
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curves(log_csv_path, out_path):
    """Total and per-task training losses over steps, from the loss log CSV."""
    steps = []
    series = {"L_all": [], "L_diar": [], "L_sep": [], "L_asr": []}
    with open(log_csv_path, newline="") as f:
        for row in csv.DictReader(f):
            steps.append(int(row["step"]))
            for key in series:
                series[key].append(float(row[key]) if row[key] else np.nan)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        for key, values in series.items():
            values = np.asarray(values)
            if np.isfinite(values).any():
                ax.plot(steps, values, label=key, linewidth=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title("training losses")
        ax.legend(ncol=4)
    return _save(fig, out_path)


def plot_separation(item_id, sample_rate, mixture, references, estimates, out_path):
    """Waveform grid: mixture on top, then per speaker the reference next to
    the recovered estimate."""
    c = len(references)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(c + 1, 2, figsize=(8, 1.6 * (c + 1)), sharex=True)
        t = np.arange(len(mixture)) / sample_rate
        axes[0, 0].plot(t, mixture, linewidth=0.5, color="k")
        axes[0, 0].set_title("input mixture")
        axes[0, 1].axis("off")
        for spk in range(c):
            axes[spk + 1, 0].plot(t, references[spk], linewidth=0.5)
            axes[spk + 1, 0].set_title(f"ground truth speaker {spk + 1}")
            axes[spk + 1, 1].plot(t, estimates[spk], linewidth=0.5, color="tab:red")
            axes[spk + 1, 1].set_title(f"recovered speaker {spk + 1}")
        for ax in axes[-1]:
            ax.set_xlabel("time (s)")
        fig.suptitle(item_id)
        fig.tight_layout()
    return _save(fig, out_path)


def plot_activity(item_id, probs, ref_frames, frame_s, out_path):
    """Per-speaker activity probabilities against the frame-level reference."""
    t, c = probs.shape
    time = (np.arange(t) + 0.5) * frame_s
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(c, 1, figsize=(7, 1.4 * c), sharex=True, squeeze=False)
        for spk in range(c):
            ax = axes[spk, 0]
            ax.fill_between(time, ref_frames[:, spk], step="mid", alpha=0.25,
                            label="reference")
            ax.plot(time, probs[:, spk], linewidth=1.0, label="probability")
            ax.set_ylim(-0.05, 1.05)
            ax.set_ylabel(f"spk {spk + 1}")
        axes[0, 0].legend(loc="upper right")
        axes[-1, 0].set_xlabel("time (s)")
        fig.suptitle(f"{item_id}: speaker activity")
        fig.tight_layout()
    return _save(fig, out_path)


def plot_layer_weights(weights_by_task, out_path):
    """Grouped bars of the per-task softmax layer weights."""
    tasks = list(weights_by_task)
    num_layers = len(next(iter(weights_by_task.values())))
    x = np.arange(num_layers)
    width = 0.8 / len(tasks)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 2.8))
        for i, task in enumerate(tasks):
            ax.bar(x + (i - (len(tasks) - 1) / 2) * width, weights_by_task[task],
                   width=width, label=task)
        ax.set_xticks(x)
        ax.set_xticklabels([f"layer {l + 1}" for l in range(num_layers)])
        ax.set_ylabel("weight")
        ax.set_title("fusion layer weights")
        ax.legend()
    return _save(fig, out_path)
