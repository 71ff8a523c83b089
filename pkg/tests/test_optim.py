"""AdamW, schedule, and clipping behavior."""

import numpy as np
import pytest

from wearbench.autodiff import Tensor
from wearbench.optim import OptimizerState, TrainingDiverged, adamw_step, clip_gradients, lr_at


def test_zero_gradient_zero_decay_leaves_params_unchanged():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    params = {"p": p}
    state = OptimizerState(params, weight_decay=0.0)
    adamw_step(params, {"p": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_first_step_with_unit_gradient_moves_by_lr():
    # Bias correction makes the first update ~ lr * sign(g).
    p = Tensor(np.array([0.0]), requires_grad=True)
    params = {"p": p}
    state = OptimizerState(params, weight_decay=0.0)
    adamw_step(params, {"p": np.array([1.0])}, state, lr=0.1)
    np.testing.assert_allclose(p.data, [-0.1], atol=1e-6)


def test_decoupled_decay_shrinks_params_with_zero_grad():
    p = Tensor(np.array([2.0]), requires_grad=True)
    params = {"p": p}
    lam, lr = 0.01, 0.5
    state = OptimizerState(params, weight_decay=lam)
    before = p.data.copy()
    adamw_step(params, {"p": np.zeros(1)}, state, lr=lr)
    np.testing.assert_allclose(p.data, before * (1 - lr * lam))


def test_nonfinite_gradient_raises_diverged():
    p = Tensor(np.array([0.0]), requires_grad=True)
    params = {"p": p}
    state = OptimizerState(params)
    with pytest.raises(TrainingDiverged):
        adamw_step(params, {"p": np.array([np.nan])}, state, lr=0.1)


def test_lr_schedule_endpoints_and_midpoint():
    base = 3e-4
    assert lr_at(0, 100, 2000, base) == 0.0
    assert lr_at(100, 100, 2000, base) == pytest.approx(base)
    mid = (100 + 2000) // 2
    assert lr_at(mid, 100, 2000, base) == pytest.approx(base / 2)
    assert lr_at(2000, 100, 2000, base) == pytest.approx(0.0, abs=1e-12)


def test_clip_gradients():
    g = {"a": np.array([0.3, 0.4])}
    assert clip_gradients(g, 1.0) == pytest.approx(0.5)
    np.testing.assert_allclose(g["a"], [0.3, 0.4])

    g = {"a": np.array([0.0, 4.0])}
    clip_gradients(g, 1.0)
    np.testing.assert_allclose(g["a"], [0.0, 1.0])

    rng = np.random.default_rng(0)
    for _ in range(20):
        g = {k: rng.standard_normal(5) * 10 for k in "abc"}
        clip_gradients(g, 1.0)
        norm = np.sqrt(sum((x * x).sum() for x in g.values()))
        assert norm <= 1.0 + 1e-9
