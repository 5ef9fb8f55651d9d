"""Parameters, the AdamW update, and finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .errors import GraphError, OptimizerError
from .tensor import Tensor, backward


class Parameter:
    """A learnable tensor plus its optimizer state, addressable by name.

    ``name`` is a dotted path assigned when the owning module tree is walked
    (e.g. ``"encoder.blocks.0.attn.wq.weight"``); it keys checkpoints.
    """

    __slots__ = ("name", "tensor", "exp_avg", "exp_avg_sq", "step")

    def __init__(self, data, name=""):
        self.name = name
        self.tensor = Tensor(np.asarray(data), requires_grad=True)
        self.exp_avg = np.zeros_like(self.tensor.data)
        self.exp_avg_sq = np.zeros_like(self.tensor.data)
        self.step = 0

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = np.asarray(value, dtype=self.tensor.data.dtype)

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def adamw_step(params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One decoupled-weight-decay Adam update with bias correction.

    Grads are left untouched; the caller zeroes them. Every parameter must
    have a populated gradient — filter unreached parameters before calling.
    """
    params = list(params)
    for p in params:
        if p.tensor.grad is None:
            raise OptimizerError(f"parameter {p.name!r} has no gradient")
    beta1, beta2 = betas
    for p in params:
        g = p.tensor.grad
        p.step += 1
        if weight_decay:
            p.tensor.data *= 1.0 - lr * weight_decay
        p.exp_avg *= beta1
        p.exp_avg += (1.0 - beta1) * g
        p.exp_avg_sq *= beta2
        p.exp_avg_sq += (1.0 - beta2) * (g * g)
        m_hat = p.exp_avg / (1.0 - beta1 ** p.step)
        v_hat = p.exp_avg_sq / (1.0 - beta2 ** p.step)
        p.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class GradCheckReport:
    """Per-parameter worst relative error between autodiff and central differences."""

    def __init__(self, tol):
        self.tol = tol
        self.entries = {}          # name -> (max_rel_err, n_coords_checked)

    def record(self, name, rel_err, n):
        self.entries[name] = (rel_err, n)

    @property
    def max_rel_err(self):
        return max((e for e, _ in self.entries.values()), default=0.0)

    def failures(self):
        return [name for name, (e, _) in self.entries.items() if not (e < self.tol)]

    @property
    def passed(self):
        return not self.failures()

    def __repr__(self):
        worst = ", ".join(f"{n}={e:.2e}" for n, (e, _) in sorted(
            self.entries.items(), key=lambda kv: -kv[1][0])[:3])
        return f"GradCheckReport(passed={self.passed}, worst: {worst})"


def _rel_err(a, b):
    # unit-floored relative error: behaves like absolute error for small grads
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def grad_check(builder, params, eps=1e-5, tol=1e-4, max_coords=None, rng=None):
    """Compare reverse-mode gradients of ``builder()`` against central differences.

    ``builder`` must deterministically produce a scalar loss Tensor from the
    current values of ``params``; two forward evaluations are compared first
    and a mismatch raises ``GraphError``. When ``max_coords`` is given, at
    most that many coordinates per parameter are probed (chosen by ``rng``).
    """
    params = list(params)
    if eps <= 0:
        raise ValueError("eps must be positive")
    l1 = builder()
    l2 = builder()
    if not np.array_equal(l1.data, l2.data):
        raise GraphError("builder is not deterministic: two forward passes differ")

    for p in params:
        p.zero_grad()
    loss = builder()
    backward(loss)
    analytic = {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for p in params}

    report = GradCheckReport(tol)
    for pos, p in enumerate(params):
        flat = p.tensor.data.reshape(-1)
        n = flat.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords, replace=False)
        worst = 0.0
        ga = analytic[id(p)].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(builder().data)
            flat[i] = orig - eps
            f_minus = float(builder().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            worst = max(worst, _rel_err(float(ga[i]), numeric))
        report.record(p.name or f"param_{pos}", worst, len(coords))
    for p in params:
        p.zero_grad()
    return report
