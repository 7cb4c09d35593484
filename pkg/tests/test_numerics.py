import threading

import numpy as np
import pytest

from app.core import numerics as nx
from app.core.errors import NonScalarLoss, NumericalError, ShapeError

INSTANCES = 100


def weighted(t, rng_seed=0):
    """Random linear functional so every output element contributes"""
    w = np.random.default_rng(rng_seed).standard_normal(t.shape)
    return (t * w).sum()


@pytest.mark.parametrize("op", [nx.add, nx.sub, nx.mul])
def test_binary_broadcast_gradients(gradcheck, op):
    rng = np.random.default_rng(0)
    for _ in range(INSTANCES):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((1, 4))
        gradcheck(lambda x, y: weighted(op(x, y)), a, b)


def test_div_and_power_gradients(gradcheck):
    rng = np.random.default_rng(1)
    for _ in range(INSTANCES):
        a = rng.standard_normal((2, 3))
        b = rng.uniform(0.5, 2.0, (2, 3))
        gradcheck(lambda x, y: weighted(nx.div(x, y) + nx.power(y, 1.5)), a, b)


@pytest.mark.parametrize("op", [nx.exp, nx.tanh, nx.sin, nx.cos])
def test_unary_gradients(gradcheck, op):
    rng = np.random.default_rng(2)
    for _ in range(INSTANCES):
        gradcheck(lambda x: weighted(op(x)), rng.standard_normal((2, 3)))


def test_log_sqrt_relu_gradients(gradcheck):
    rng = np.random.default_rng(3)
    for _ in range(INSTANCES):
        positive = rng.uniform(0.2, 3.0, (4,))
        away_from_kink = rng.choice([-1.0, 1.0], 4) * rng.uniform(0.1, 2.0, 4)
        gradcheck(lambda x: weighted(nx.log(x) + nx.sqrt(x)), positive)
        gradcheck(lambda x: weighted(nx.relu(x)), away_from_kink)


def test_reduction_gradients(gradcheck):
    rng = np.random.default_rng(4)
    for _ in range(INSTANCES):
        a = rng.standard_normal((3, 4, 2))
        gradcheck(lambda x: weighted(x.sum(axis=1)), a)
        gradcheck(lambda x: weighted(x.mean(axis=(0, 2), keepdims=True)), a)
        gradcheck(lambda x: weighted(nx.cumsum(x, axis=1)), a)


def test_mse_gradient(gradcheck):
    rng = np.random.default_rng(5)
    for _ in range(INSTANCES):
        gradcheck(nx.mse, rng.standard_normal((5, 3)), rng.standard_normal((5, 3)))


def test_shape_op_gradients(gradcheck):
    rng = np.random.default_rng(6)
    for _ in range(INSTANCES):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((2, 4))
        gradcheck(lambda x, y: weighted(nx.concat([x, y], axis=0)), a, b)
        gradcheck(lambda x: weighted(nx.stack([x, x * 2.0], axis=1)), a)
        gradcheck(lambda x: weighted(x[1:, ::2]), a)
        gradcheck(lambda x: weighted(nx.gather(x, [0, 2, 2], axis=0)), a)
        gradcheck(lambda x: weighted(x.reshape(2, 6).transpose()), a)


def test_matmul_and_cross_gradients(gradcheck):
    rng = np.random.default_rng(7)
    for _ in range(INSTANCES):
        gradcheck(lambda x, y: weighted(x @ y), rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2)))
        gradcheck(lambda x, y: weighted(x @ y), rng.standard_normal((3, 3)), rng.standard_normal(3))
        gradcheck(lambda x, y: weighted(nx.cross(x, y)), rng.standard_normal((4, 3)), rng.standard_normal((4, 3)))


def test_softmax_gradients(gradcheck):
    rng = np.random.default_rng(8)
    for _ in range(INSTANCES):
        a = rng.standard_normal((3, 5))
        gradcheck(lambda x: weighted(nx.softmax(x)), a)
        gradcheck(lambda x: weighted(nx.log_softmax(x)), a)


def test_convolution_gradients(gradcheck):
    rng = np.random.default_rng(9)
    for _ in range(20):
        x = rng.standard_normal((2, 3, 8))
        w = rng.standard_normal((4, 3, 5)) * 0.3
        b = rng.standard_normal(4)
        gradcheck(lambda xx, ww, bb: weighted(nx.conv1d(xx, ww, bb, stride=2)), x, w, b)
        z = rng.standard_normal((2, 4, 4))
        wt = rng.standard_normal((4, 3, 5)) * 0.3
        gradcheck(lambda zz, ww: weighted(nx.conv_transpose1d(zz, ww, stride=2, out_length=8)), z, wt)


def test_conv_transpose_is_adjoint_of_conv(rng):
    x = rng.standard_normal((1, 3, 10))
    w = rng.standard_normal((4, 3, 5))
    y = rng.standard_normal((1, 4, 5))
    forward = nx.conv1d(x, w, stride=2).data
    adjoint = nx.conv_transpose1d(y, w, stride=2, out_length=10).data
    assert np.sum(forward * y) == pytest.approx(np.sum(x * adjoint), rel=1e-10)


def test_reused_leaf_accumulates():
    x = nx.Tensor(np.array([2.0, -3.0]), requires_grad=True)
    y = (x * x + x).sum()
    nx.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_rejects_non_scalar():
    x = nx.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NonScalarLoss):
        nx.backward(x * 2.0)


def test_shape_errors():
    with pytest.raises(ShapeError):
        nx.add(np.ones((2, 3)), np.ones((4, 3)))
    with pytest.raises(ShapeError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        nx.mse(np.ones(3), np.ones(4))


def test_no_grad_records_nothing():
    x = nx.Tensor(np.ones(2), requires_grad=True)
    with nx.no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad


def test_no_grad_is_local_to_its_thread():
    inside, done = threading.Event(), threading.Event()

    def hold():
        with nx.no_grad():
            inside.set()
            done.wait(5.0)

    holder = threading.Thread(target=hold)
    holder.start()
    try:
        assert inside.wait(5.0)
        x = nx.Tensor(np.ones(3), requires_grad=True)
        loss = (x * 2.0).sum()
        nx.backward(loss)
    finally:
        done.set()
        holder.join()
    assert loss.requires_grad
    np.testing.assert_allclose(x.grad, [2.0, 2.0, 2.0])


def test_adam_step_matches_reference():
    params = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.array([0.5, -1.0])}
    state = nx.AdamState(lr=0.1)
    nx.adam_step(params, grads, state)
    # first bias-corrected step moves every coordinate by lr * sign(g)
    np.testing.assert_allclose(params["w"], [0.9, -1.9], atol=1e-6)
    assert state.step == 1


def test_adam_step_rejects_nan():
    params = {"w": np.zeros(2)}
    with pytest.raises(NumericalError):
        nx.adam_step(params, {"w": np.array([np.nan, 0.0])}, nx.AdamState(lr=0.1))
    np.testing.assert_array_equal(params["w"], 0.0)
