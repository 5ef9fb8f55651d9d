"""AdamW update oracle and gradient-check machinery."""

import numpy as np
import pytest

from ume import tensor as T
from ume.errors import GraphError, OptimizerError
from ume.optim import Parameter, adamw_step, grad_check


class TestAdamw:
    def test_first_step_hand_recurrence(self):
        # theta=1, g=0.5, lr=0.1, betas (0.9, 0.999), eps 1e-8, wd 0:
        # m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps) -> 0.1
        p = Parameter(np.array([1.0]), "theta")
        p.tensor.grad = np.array([0.5])
        adamw_step([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
        np.testing.assert_allclose(p.data, [0.9], atol=1e-6)
        assert p.step == 1

    def test_zero_grad_leaves_parameters_unchanged(self):
        p = Parameter(np.array([1.5, -2.5]), "theta")
        p.tensor.grad = np.zeros(2)
        adamw_step([p], lr=0.1, weight_decay=0.0)
        np.testing.assert_allclose(p.data, [1.5, -2.5])

    def test_decoupled_decay(self):
        p = Parameter(np.array([4.0]), "theta")
        p.tensor.grad = np.zeros(1)
        adamw_step([p], lr=0.1, weight_decay=0.1)
        np.testing.assert_allclose(p.data, [4.0 * (1 - 0.01)])

    def test_missing_grad_names_parameter(self):
        p = Parameter(np.ones(2), "encoder.blocks.0.weight")
        with pytest.raises(OptimizerError, match="encoder.blocks.0.weight"):
            adamw_step([p], lr=0.1)

    def test_grads_left_untouched(self):
        p = Parameter(np.ones(2), "theta")
        p.tensor.grad = np.array([0.3, -0.3])
        adamw_step([p], lr=0.01)
        np.testing.assert_allclose(p.tensor.grad, [0.3, -0.3])

    def test_matches_reference_recurrence_over_steps(self):
        rng = np.random.default_rng(9)
        p = Parameter(rng.normal(size=4), "theta")
        theta = p.data.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        lr, b1, b2, eps, wd = 3e-2, 0.9, 0.999, 1e-8, 0.01
        for step in range(1, 6):
            g = rng.normal(size=4)
            p.tensor.grad = g.copy()
            adamw_step([p], lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
            theta = theta * (1 - lr * wd)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta = theta - lr * (m / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + eps)
            np.testing.assert_allclose(p.data, theta, atol=1e-12)


class TestGradCheck:
    def test_quadratic(self):
        p = Parameter(np.float64(3.0), "theta")
        report = grad_check(lambda: T.mul(p.tensor, p.tensor), [p], eps=1e-5, tol=1e-4)
        assert report.passed
        assert report.entries["theta"][0] < 1e-8

    def test_nondeterministic_builder_detected(self):
        p = Parameter(np.float64(1.0), "theta")
        state = {"n": 0.0}

        def builder():
            state["n"] += 1.0
            return T.mul(p.tensor, T.constant(state["n"]))

        with pytest.raises(GraphError, match="deterministic"):
            grad_check(builder, [p])

    def test_corrupted_conv_backward_flagged(self):
        # a conv whose kernel gradient is scaled by 1.01: only the kernel
        # parameter should fail the check
        rng = np.random.default_rng(4)
        x = Parameter(rng.normal(size=(6, 2)), "x")
        w = Parameter(rng.normal(size=(3, 2, 2)), "conv.weight")
        mix = T.constant(rng.normal(size=(4, 2)))

        def bad_conv(xt, wt):
            out = T.conv1d(xt, wt)
            true_backward = out._backward

            def corrupted(g):
                # route gradient through the true op, then poison the kernel part
                saved = wt.grad.copy() if wt.grad is not None else np.zeros_like(wt.data)
                true_backward(g)
                wt.grad = saved + 1.01 * (wt.grad - saved)

            out._backward = corrupted
            return out

        def builder():
            h = bad_conv(x.tensor, w.tensor)
            return T.tsum(T.mul(h, mix))

        report = grad_check(builder, [x, w], eps=1e-6, tol=1e-4)
        assert report.failures() == ["conv.weight"]
