import numpy as np
import pytest

from pmrf.autodiff import Tensor
from pmrf.optim import OptimizerError, OptimState, adamw_step, cosine_lr


def _param(value, grad=None):
    t = Tensor(np.array([value], dtype=np.float32), requires_grad=True)
    if grad is not None:
        t.grad = np.array([grad], dtype=np.float32)
    return t


class TestAdamW:
    def test_zero_grad_zero_decay_is_fixed_point(self):
        p = _param(1.5, grad=0.0)
        state = OptimState(lr=0.1, weight_decay=0.0)
        adamw_step({"w": p}, state)
        assert p.data[0] == pytest.approx(1.5, abs=0)

    def test_single_step_hand_trace(self):
        # w=1, g=1, lr=0.1, betas=(0.9,0.999), eps=1e-8, wd=0:
        # m=0.1, v=0.001, mhat=1, vhat=1 -> w = 1 - 0.1 * 1/(1+1e-8)
        p = _param(1.0, grad=1.0)
        state = OptimState(lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
        adamw_step({"w": p}, state)
        expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))
        assert p.data[0] == pytest.approx(expected, abs=1e-9)

    def test_decay_is_decoupled(self):
        p = _param(2.0, grad=0.0)
        state = OptimState(lr=0.1, weight_decay=0.01)
        adamw_step({"w": p}, state)
        assert p.data[0] == pytest.approx(2.0 * (1.0 - 0.1 * 0.01), rel=1e-7)

    def test_two_step_trace_matches_manual_update(self):
        p = _param(0.5, grad=0.3)
        state = OptimState(lr=0.05, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
        w = 0.5
        m = v = 0.0
        for t in (1, 2):
            g = 0.3
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9**t)
            vhat = v / (1 - 0.999**t)
            w -= 0.05 * mhat / (np.sqrt(vhat) + 1e-8)
            p.grad = np.array([g], dtype=np.float32)
            adamw_step({"w": p}, state)
        assert p.data[0] == pytest.approx(w, rel=1e-6)

    def test_missing_gradient_names_parameter(self):
        p = _param(1.0)
        with pytest.raises(OptimizerError, match="'w'"):
            adamw_step({"w": p}, OptimState())

    def test_moment_buffers_match_parameter_shapes(self):
        rng = np.random.default_rng(0)
        p = Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
        p.grad = rng.standard_normal((3, 4)).astype(np.float32)
        state = OptimState()
        adamw_step({"w": p}, state)
        assert state.m["w"].shape == (3, 4)
        assert state.v["w"].shape == (3, 4)
        assert state.step_count == 1
        adamw_step({"w": p}, state)
        assert state.step_count == 2

    def test_invalid_hyperparameters(self):
        with pytest.raises(OptimizerError):
            OptimState(lr=-1.0)
        with pytest.raises(OptimizerError):
            OptimState(betas=(1.0, 0.999))


class TestCosine:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 200, 5e-4) == pytest.approx(5e-4)
        assert cosine_lr(200, 200, 5e-4) == pytest.approx(0.0, abs=1e-18)
        assert cosine_lr(100, 200, 5e-4) == pytest.approx(2.5e-4)

    def test_monotone_non_increasing(self):
        vals = [cosine_lr(e, 50, 1e-3) for e in range(51)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_zero_total_epochs_rejected(self):
        with pytest.raises(OptimizerError):
            cosine_lr(0, 0, 1e-3)

    def test_epoch_out_of_range_rejected(self):
        with pytest.raises(OptimizerError):
            cosine_lr(11, 10, 1e-3)
