import numpy as np
import pytest

from scop.core import functional as F
from scop.core.exceptions import ShapeError
from scop.core.optim import AdamState, SGDState, adam_step, cosine_lr, sgd_step
from scop.core.tensor import Tensor, backward, make_op
from scop.models.architectures import build_arch
from scop.models.network import run


def numeric_grad(fn, array, eps=1e-6):
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus, minus = array.copy(), array.copy()
        plus[idx] += eps
        minus[idx] -= eps
        grad[idx] = (fn(plus) - fn(minus)) / (2 * eps)
    return grad


def check_grads(build, arrays, rtol=1e-5, atol=1e-6):
    """build(*tensors) -> scalar Tensor; compares tape gradients with central differences."""
    tensors = [Tensor(a, requires_grad=True, name=f"p{k}") for k, a in enumerate(arrays)]
    grads = backward(build(*tensors))
    for k, array in enumerate(arrays):
        def fn(value, k=k):
            args = [Tensor(value) if j == k else Tensor(a) for j, a in enumerate(arrays)]
            return build(*args).item()
        np.testing.assert_allclose(grads[f"p{k}"].data, numeric_grad(fn, array), rtol=rtol, atol=atol)


def test_tensor_is_immutable_float64():
    source = np.arange(4, dtype=np.int32)
    t = Tensor(source)
    assert t.data.dtype == np.float64
    with pytest.raises(ValueError):
        t.data[0] = 5.0
    source[0] = 99
    assert t.data[0] == 0.0


def test_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        Tensor([1.0, np.nan])


def test_arithmetic_and_reduction_gradients(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4,))
    check_grads(lambda x, y: ((x * y - x / (y * y + 1.0)) ** 2).mean(), [a, b])
    check_grads(lambda x, y: (x @ y.reshape(4, 1)).sum() + x.sum(axis=0).mean(), [a, b])


def test_broadcast_gradient_is_summed(rng):
    x = Tensor(rng.standard_normal((5, 3)), requires_grad=True, name="x")
    bias = Tensor(np.zeros(3), requires_grad=True, name="bias")
    grads = backward((x + bias).sum())
    np.testing.assert_allclose(grads["bias"].data, np.full(3, 5.0))


def test_backward_twice_is_identical(rng):
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True, name="x")
    loss = (F.sigmoid(x) * x).sum()
    first, second = backward(loss), backward(loss)
    np.testing.assert_array_equal(first["x"].data, second["x"].data)


def test_backward_needs_scalar(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_detach_stops_gradient(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True, name="x")
    grads = backward((x * x.detach()).sum())
    np.testing.assert_allclose(grads["x"].data, x.data)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients(rng, stride, padding):
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out_shape = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).shape
    weights = Tensor(rng.standard_normal(out_shape))
    check_grads(lambda x_, w_, b_: (F.conv2d(x_, w_, b_, stride, padding) * weights).sum(), [x, w, b])


def test_conv2d_matches_direct_sum(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((1, 2, 3, 3))
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1))).data
    assert out.shape == (1, 1, 2, 2)
    assert out[0, 0, 1, 1] == pytest.approx((x[0, :, 1:4, 1:4] * w[0]).sum())


def test_conv2d_rejects_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))), Tensor(np.zeros(2)))


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(rng, training):
    x = rng.standard_normal((4, 3, 2, 2))
    gamma = rng.standard_normal(3)
    beta = rng.standard_normal(3)
    stats = F.RunningStats(rng.standard_normal(3), rng.random(3) + 0.5)
    weights = Tensor(rng.standard_normal(x.shape))
    check_grads(lambda x_, g_, b_: (F.batch_norm(x_, g_, b_, stats, training)[0] * weights).sum(),
                [x, gamma, beta], rtol=1e-4, atol=1e-5)


def test_batch_norm_updates_running_stats_only_in_training(rng):
    x = Tensor(rng.standard_normal((8, 2)) * 3.0 + 1.0)
    stats = F.RunningStats(np.zeros(2), np.ones(2))
    _, after_eval = F.batch_norm(x, np.ones(2), np.zeros(2), stats, training=False)
    assert after_eval is stats
    _, after_train = F.batch_norm(x, np.ones(2), np.zeros(2), stats, training=True, momentum=0.1)
    np.testing.assert_allclose(after_train.mean, 0.1 * x.data.mean(axis=0))
    np.testing.assert_allclose(after_train.var, 0.9 + 0.1 * x.data.var(axis=0, ddof=1))


def test_max_pool_relu_and_linear_gradients(rng):
    x = rng.standard_normal((2, 2, 4, 4))
    w = rng.standard_normal((3, 8))
    b = rng.standard_normal(3)
    check_grads(lambda x_, w_, b_: F.linear(F.flatten(F.relu(F.max_pool2d(x_, 2))), w_, b_).sum(), [x, w, b])


def test_cross_entropy_gradient_and_value(rng):
    logits = rng.standard_normal((5, 4))
    labels = np.array([0, 3, 1, 1, 2])
    check_grads(lambda z: F.cross_entropy(z, labels), [logits])
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(probs[np.arange(5), labels]))
    assert F.cross_entropy(Tensor(logits), labels).item() == pytest.approx(expected)


def test_sigmoid_is_stable_for_large_inputs():
    out = F.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(out))


def test_adam_moves_against_gradient_and_skips_missing():
    params = {"a": np.array([1.0, -1.0]), "b": np.array([2.0])}
    new, state = adam_step(params, {"a": np.array([0.5, -0.5])}, AdamState(), lr=0.1)
    np.testing.assert_allclose(new["a"], [0.9, -0.9])
    np.testing.assert_array_equal(new["b"], params["b"])
    assert state.step == 1
    np.testing.assert_array_equal(params["a"], [1.0, -1.0])


def test_sgd_momentum_and_weight_decay():
    params = {"w": np.array([1.0])}
    new, state = sgd_step(params, {"w": np.array([1.0])}, SGDState(), lr=0.1, momentum=0.9, weight_decay=0.5)
    np.testing.assert_allclose(new["w"], [1.0 - 0.1 * 1.5])
    new, _ = sgd_step(new, {"w": np.array([0.0])}, state, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_allclose(new["w"], [0.85 - 0.1 * 0.9 * 1.5])


def test_cosine_lr_schedule():
    assert cosine_lr(0.1, 0, 10) == pytest.approx(0.1)
    assert cosine_lr(0.1, 5, 10) == pytest.approx(0.05)
    assert cosine_lr(0.1, 10, 10) == pytest.approx(0.0)


def test_small_cnn_gradients_match_finite_differences(rng):
    net = build_arch("small-cnn", num_classes=10, input_shape=(1, 8, 8), rng=rng)
    batch = rng.standard_normal((4, 1, 8, 8))
    labels = np.array([0, 3, 7, 3])

    def loss_of(candidate):
        return F.cross_entropy(run(candidate, batch, "train").logits, labels).item()

    grads = backward(F.cross_entropy(run(net, batch, "train", trainable=True).logits, labels))
    params = net.parameters()
    assert set(grads) == set(params)
    eps = 1e-5
    for name, value in params.items():
        flat = rng.choice(value.size, size=min(value.size, 5), replace=False)
        for position in flat:
            idx = np.unravel_index(position, value.shape)
            bumped = []
            for sign in (1.0, -1.0):
                array = value.copy()
                array[idx] += sign * eps
                bumped.append(loss_of(net.with_state({name: array})))
            numeric = (bumped[0] - bumped[1]) / (2 * eps)
            np.testing.assert_allclose(grads[name].data[idx], numeric, rtol=1e-3, atol=1e-6, err_msg=name)


def test_adam_descends_a_quadratic():
    params, state = {"x": np.array([1.0])}, AdamState()
    for _ in range(100):
        params, state = adam_step(params, {"x": 2.0 * params["x"]}, state, lr=0.1)
    assert abs(params["x"][0]) < 1e-2
    assert state.step == 100


def test_op_results_do_not_freeze_the_callers_array():
    data = np.arange(3.0)
    out = make_op("identity", data, (Tensor(np.zeros(3), requires_grad=True),), lambda g: (g,))
    assert data.flags.writeable
    assert not out.data.flags.writeable
    data[0] = 7.0
    with pytest.raises(ValueError):
        out.data[0] = 1.0
