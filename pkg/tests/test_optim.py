import numpy as np
import pytest

from otfpf.autodiff import Parameter
from otfpf.errors import ConfigError, NumericalError
from otfpf.optim import AdamW


def test_zero_gradients_apply_only_decay():
    p = Parameter(np.array([2.0, -4.0], np.float32))
    opt = AdamW([p], lr=5e-4, weight_decay=5e-4)
    before = p.data.copy()
    opt.step()  # grad is None -> zeros
    np.testing.assert_allclose(p.data, before * (1.0 - 5e-4 * 5e-4), rtol=1e-7)


def test_quadratic_loss_decreases():
    p = Parameter(np.array([3.0], np.float32))
    opt = AdamW([p], lr=0.05, weight_decay=0.0)
    losses = []
    for _ in range(10):
        losses.append(float(p.data[0] ** 2))
        p.grad = 2.0 * p.data
        opt.step()
        opt.zero_grad()
    losses.append(float(p.data[0] ** 2))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_trajectory_bit_identical():
    def run():
        rng = np.random.default_rng(3)
        p = Parameter(rng.standard_normal(5).astype(np.float32))
        opt = AdamW([p], lr=1e-3, weight_decay=1e-2)
        for t in range(20):
            p.grad = np.sin(p.data * (t + 1)).astype(np.float32)
            opt.step()
        return p.data.copy()

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_nonfinite_gradient_rejected_without_mutation():
    p = Parameter(np.array([1.0, 2.0], np.float32))
    q = Parameter(np.array([3.0], np.float32))
    opt = AdamW([p, q], lr=1e-2)
    p.grad = np.array([1.0, 1.0], np.float32)
    q.grad = np.array([np.nan], np.float32)
    before_p, before_q = p.data.copy(), q.data.copy()
    with pytest.raises(NumericalError):
        opt.step()
    assert np.array_equal(p.data, before_p)
    assert np.array_equal(q.data, before_q)
    assert opt.step_count == 0


def test_bias_correction_first_step_moves_by_lr():
    # with beta moments zeroed, the first update is lr * sign(grad) in the limit eps -> 0
    p = Parameter(np.array([0.0], np.float32))
    opt = AdamW([p], lr=0.1, weight_decay=0.0, eps=1e-12)
    p.grad = np.array([0.5], np.float32)
    opt.step()
    np.testing.assert_allclose(p.data, [-0.1], atol=1e-6)


def test_config_validation():
    p = Parameter(np.zeros(1, np.float32))
    with pytest.raises(ConfigError):
        AdamW([p], lr=0.0)
    with pytest.raises(ConfigError):
        AdamW([p], betas=(1.0, 0.9))
    with pytest.raises(ConfigError):
        AdamW([p], weight_decay=-0.1)
