"""Multi-task training loop.

Batches are processed item by item at their native lengths and averaged, so
no padding ever contributes to a loss. The combined objective is the
weighted sum of the per-task batch means; tasks with zero weight are not
evaluated at all, so their private parameters receive no gradient and are
never stepped.
"""

from __future__ import annotations

import math
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import (load_into_model, load_optimizer_state, save_checkpoint,
                         save_optimizer_state)
from .diar import pit_bce_loss
from .errors import BatchError, ConfigError, DivergenceError, ItemSkippedError
from .optim import adamw_step
from .rng import stream
from .sep import si_sdr_pit_loss

LOG_COLUMNS = ("step", "lr", "L_all", "L_diar", "L_sep", "L_asr",
               "perm_switch_diar", "perm_switch_sep", "perm_switch_asr")
DIVERGENCE_WINDOW = 100
DIVERGENCE_FACTOR = 10.0


@dataclass
class LossWeights:
    asr: float = 0.33
    diar: float = 0.33
    sep: float = 0.34

    def validate(self, path="train.loss_weights"):
        for task in ("asr", "diar", "sep"):
            if getattr(self, task) < 0:
                raise ConfigError(f"{path}.{task}", "must be >= 0")
        if self.asr == self.diar == self.sep == 0:
            raise ConfigError(path, "at least one task weight must be positive")
        return self

    def active_tasks(self):
        return tuple(task for task in ("diar", "sep", "asr") if getattr(self, task) > 0)


@dataclass
class TrainConfig:
    steps: int = 100
    batch_size: int = 8
    lr_peak: float = 4e-4
    warmup_steps: int = 500
    weight_decay: float = 1e-6
    seed: int = 0
    fusion_mode: str = "rwse"
    checkpoint_interval: int = 0        # 0 disables periodic checkpoints
    init_checkpoint: str | None = None

    def validate(self, path="train"):
        if self.steps < 1:
            raise ConfigError(f"{path}.steps", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"{path}.batch_size", "must be >= 1")
        if self.warmup_steps < 1:
            raise ConfigError(f"{path}.warmup_steps", "must be >= 1")
        if self.warmup_steps > self.steps:
            raise ConfigError(f"{path}.warmup_steps",
                              f"warmup {self.warmup_steps} exceeds steps {self.steps}")
        if self.lr_peak < 0 or self.weight_decay < 0:
            raise ConfigError(f"{path}.lr_peak", "rates must be >= 0")
        return self


@dataclass
class TaskLossBundle:
    """Per-task batch losses (absent tasks stay None) and the weighted total."""
    losses: dict
    perms: dict                      # task -> {item_id: permutation}
    l_all: float
    n_items: int
    skipped_items: list = field(default_factory=list)


def lr_schedule(step, peak, warmup):
    """Linear warmup to the peak, then inverse-square-root decay."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= warmup:
        return peak * step / warmup
    return peak * math.sqrt(warmup / step)


def total_loss(model, batch, weights):
    """Weighted multi-task loss over a batch of MixtureSamples.

    Returns (scalar Tensor for backward, TaskLossBundle). The logged total
    is recombined from the per-task means in float64, so the weighted-sum
    identity holds exactly on every logged step.
    """
    tasks = weights.active_tasks()
    per_task = {task: [] for task in tasks}
    perms = {task: {} for task in tasks}
    skipped = []
    n_used = 0
    for item in batch:
        out = model.forward_item(item.mixture, tasks)
        n_used += 1
        if "diar" in tasks:
            labels = model.diar_labels(item, out.fused["diar"].shape[0])
            loss, perm = pit_bce_loss(out.diar.logits, labels)
            per_task["diar"].append(loss)
            perms["diar"][item.id] = perm
        if "sep" in tasks:
            loss, perm = si_sdr_pit_loss(out.sep_estimates, item.sources)
            per_task["sep"].append(loss)
            perms["sep"][item.id] = perm
        if "asr" in tasks:
            try:
                loss, perm = model.asr_head.asr_pit_loss(out.asr_reps, item.transcripts)
                per_task["asr"].append(loss)
                perms["asr"][item.id] = perm
            except ItemSkippedError as exc:
                skipped.append((item.id, str(exc)))
    if "asr" in tasks and not per_task["asr"]:
        raise BatchError("every item in the batch was CTC-infeasible")

    losses = {"diar": None, "sep": None, "asr": None}
    combined = None
    for task in tasks:
        terms = per_task[task]
        mean = terms[0]
        for term in terms[1:]:
            mean = T.add(mean, term)
        mean = T.mul(mean, 1.0 / len(terms))
        losses[task] = float(mean.data)
        weighted = T.mul(mean, float(getattr(weights, task)))
        combined = weighted if combined is None else T.add(combined, weighted)

    l_all = sum(getattr(weights, task) * losses[task] for task in tasks)
    bundle = TaskLossBundle(losses=losses, perms=perms, l_all=l_all,
                            n_items=n_used, skipped_items=skipped)
    return combined, bundle


def batch_indices(num_items, batch_size, seed, step):
    """Deterministic batch for a 1-based step: a pure function of the seed,
    so training can resume mid-run without replaying history."""
    per_epoch = max(1, math.ceil(num_items / batch_size))
    epoch = (step - 1) // per_epoch
    slot = (step - 1) % per_epoch
    order = stream(seed, "order", epoch).permutation(num_items)
    return order[slot * batch_size:(slot + 1) * batch_size].tolist()


def _check_divergence(l_all, history, step):
    if math.isnan(l_all):
        raise DivergenceError(step, "loss is NaN")
    if history:
        med = float(np.median(history))
        ceiling = med + (DIVERGENCE_FACTOR - 1.0) * max(abs(med), 1.0)
        if l_all > ceiling:
            raise DivergenceError(step, f"loss {l_all:.4g} blew past "
                                        f"{DIVERGENCE_FACTOR}x the trailing median "
                                        f"{med:.4g}")


def _format_row(step, lr, bundle, switches):
    cells = [str(step), repr(lr), repr(bundle.l_all)]
    for task in ("diar", "sep", "asr"):
        value = bundle.losses[task]
        cells.append("" if value is None else repr(value))
    cells.extend(str(switches[task]) for task in ("diar", "sep", "asr"))
    return ",".join(cells)


@dataclass
class TrainResult:
    final_checkpoint: str
    optimizer_checkpoint: str
    log_path: str
    checkpoints: list
    final_step: int


def train(model, dataset, config, weights, out_dir, resume_from=None):
    """Run the training loop; deterministic given (model seed, config seed).

    Emits a per-step CSV loss log and atomic checkpoints. Raises
    ``DivergenceError`` when the loss is NaN or jumps an order of magnitude
    past its trailing median.
    """
    config.validate()
    weights.validate()
    if not dataset:
        raise BatchError("dataset is empty")
    os.makedirs(out_dir, exist_ok=True)
    params = model.parameters()

    start_step = 0
    last_perms = {task: {} for task in ("diar", "sep", "asr")}
    history = deque(maxlen=DIVERGENCE_WINDOW)
    if resume_from is not None:
        load_into_model(model, resume_from)
        optim_meta = load_optimizer_state(resume_from + ".optim", params)
        start_step = int(optim_meta.get("step", 0))
        last_perms = {task: {k: tuple(v) for k, v in m.items()}
                      for task, m in optim_meta.get("last_perms", last_perms).items()}
        history.extend(optim_meta.get("loss_history", []))

    log_path = os.path.join(out_dir, "loss_log.csv")
    checkpoints = []

    def save(step, tag=None):
        name = tag or f"step_{step:06d}"
        ckpt = os.path.join(out_dir, f"{name}.ckpt")
        save_checkpoint(ckpt, model.state_arrays(),
                        meta={"model": model.config.to_dict(), "step": step})
        save_optimizer_state(ckpt + ".optim", params,
                             {"step": step,
                              "last_perms": {t: {k: list(v) for k, v in m.items()}
                                             for t, m in last_perms.items()},
                              "loss_history": list(history)})
        checkpoints.append(ckpt)
        return ckpt

    with open(log_path, "w", encoding="utf-8") as log:
        log.write(",".join(LOG_COLUMNS) + "\n")
        for step in range(start_step + 1, config.steps + 1):
            idx = batch_indices(len(dataset), config.batch_size, config.seed, step)
            batch = [dataset[i] for i in idx]
            model.zero_grad()
            # overflow is allowed to propagate as inf/NaN; the guard below is
            # the detector, so keep numpy quiet about it
            with np.errstate(over="ignore", invalid="ignore"):
                loss_t, bundle = total_loss(model, batch, weights)
                _check_divergence(bundle.l_all, history, step)
                history.append(bundle.l_all)
                T.backward(loss_t)
            lr = lr_schedule(step, config.lr_peak, config.warmup_steps)
            stepped = [p for p in params if p.tensor.grad is not None]
            if stepped:
                adamw_step(stepped, lr, weight_decay=config.weight_decay)
            switches = {}
            for task in ("diar", "sep", "asr"):
                count = 0
                for item_id, perm in bundle.perms.get(task, {}).items():
                    prev = last_perms[task].get(item_id)
                    if prev is not None and tuple(prev) != tuple(perm):
                        count += 1
                    last_perms[task][item_id] = tuple(perm)
                switches[task] = count
            log.write(_format_row(step, lr, bundle, switches) + "\n")
            log.flush()
            if config.checkpoint_interval and step % config.checkpoint_interval == 0:
                save(step)
        final = save(config.steps, tag="final")
    return TrainResult(final_checkpoint=final, optimizer_checkpoint=final + ".optim",
                       log_path=log_path, checkpoints=checkpoints,
                       final_step=config.steps)


def pretrain_asr(model, dataset, config, out_dir):
    """Single-task recognition pre-training; the resulting checkpoint seeds
    joint runs while the other heads keep their flat-start values."""
    weights = LossWeights(asr=1.0, diar=0.0, sep=0.0)
    return train(model, dataset, config, weights, out_dir)
