import numpy as np
import pytest

from otfpf import ops
from otfpf.autodiff import Parameter, Tensor, no_grad
from otfpf.errors import GraphError


def test_sum_of_squares_gradient():
    x = Parameter(np.array([1.0, -2.0, 3.0]))
    loss = ops.mul(x, x).sum()
    loss.backward()
    np.testing.assert_allclose(x.grad, 2.0 * x.data, rtol=1e-6)


def test_fanout_gradient_doubles():
    x = Parameter(np.array([1.5, -0.5]))
    loss = ops.add(x, x).sum()
    loss.backward()
    np.testing.assert_allclose(x.grad, np.full(2, 2.0), rtol=0)


def test_gradient_accumulates_across_backward_calls():
    x = Parameter(np.array([2.0]))
    for _ in range(2):
        loss = ops.mul(x, x).sum()
        loss.backward()
    np.testing.assert_allclose(x.grad, np.array([8.0]))


def test_backward_rejects_nonscalar():
    x = Parameter(np.ones(3))
    y = ops.mul(x, 2.0)
    with pytest.raises(GraphError):
        y.backward()


def test_backward_rejects_unrecorded():
    with pytest.raises(GraphError):
        Tensor(np.float32(1.0)).backward()
    x = Parameter(np.ones(2))
    with no_grad():
        y = ops.mul(x, x).sum()
    with pytest.raises(GraphError):
        y.backward()


def test_no_grad_blocks_recording():
    x = Parameter(np.ones(4))
    with no_grad():
        y = ops.mul(x, 3.0)
    assert y._vjp is None and y._parents == ()


def test_replay_is_bit_identical(rng):
    x = Tensor(rng.standard_normal((5, 7)).astype(np.float32))
    w = Tensor(rng.standard_normal((7, 3)).astype(np.float32))

    def run():
        return ops.gelu(ops.matmul(x, w)).sum().data

    first = run()
    for _ in range(3):
        assert np.array_equal(first, run())


def test_chain_through_mixed_ops(rng):
    from tests.conftest import check_gradients

    a = rng.standard_normal((4, 5)).astype(np.float32)
    b = rng.standard_normal((5, 3)).astype(np.float32)

    def loss(at, bt):
        h = ops.matmul(at, bt)
        return ops.mul(ops.gelu(h), h).mean()

    check_gradients(loss, [a, b], tol=1e-3)


def test_broadcast_binary_gradients(rng):
    from tests.conftest import check_gradients

    a = rng.standard_normal((4, 5)).astype(np.float32)
    b = rng.standard_normal((5,)).astype(np.float32)
    check_gradients(lambda at, bt: (at + bt).abs().sum(), [a, b], tol=2e-3)
    check_gradients(lambda at, bt: ops.mul(at, bt).sum(), [a, b], tol=1e-3)
    c = rng.standard_normal((4, 5)).astype(np.float32) + 3.0
    check_gradients(lambda at, ct: ops.div(at, ct).sum(), [a, c], tol=1e-3)


def test_exp_log_power_gradients(rng):
    from tests.conftest import check_gradients

    a = (rng.uniform(0.5, 2.0, size=(3, 4))).astype(np.float32)
    check_gradients(lambda t: ops.exp(t).sum(), [a], tol=1e-3)
    check_gradients(lambda t: ops.log(t).sum(), [a], tol=1e-3)
    check_gradients(lambda t: ops.power(t, 3.0).sum(), [a], tol=1e-3)


def test_concat_narrow_reshape_gradients(rng):
    from tests.conftest import check_gradients

    a = rng.standard_normal((2, 3)).astype(np.float32)
    b = rng.standard_normal((2, 2)).astype(np.float32)

    def loss(at, bt):
        joined = ops.concat([at, bt], axis=-1)
        piece = ops.narrow(joined, -1, 1, 3)
        return ops.mul(piece.reshape(6), 2.0).sum()

    check_gradients(loss, [a, b], tol=1e-3)
