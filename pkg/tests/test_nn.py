import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrpet import oracles
from lrpet.nn import (
    AvgPool,
    BatchNorm,
    Conv2d,
    Flatten,
    Linear,
    Network,
    ReLU,
    StateError,
    cross_entropy_loss,
    desk_cnn,
    mlp,
    sgd_step,
    small_resnet,
)
from lrpet.tensor import ParameterError
from lrpet.verify import finite_difference_grads, gradient_relative_error


def perturbed(net, seed=0, scale=0.1):
    rng = np.random.default_rng(seed)
    for k, v in net.params.items():
        net.params[k] = v + scale * rng.standard_normal(v.shape)
    return net


def fd_error(net, x, y):
    net.train()
    logits, tape = net.forward(x)
    _, d = cross_entropy_loss(logits, y)
    return gradient_relative_error(net.backward(tape, d), finite_difference_grads(net, x, y))


def test_identity_linear_network():
    net = Network([Linear(3, 3, bias=False)], (3,))
    net.params["0.weight"] = np.eye(3)
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(net.forward(x)[0], x)


def test_relu_forward():
    net = Network([ReLU()], (3,))
    np.testing.assert_array_equal(net.forward(np.array([[-1.0, 0.0, 2.0]]))[0], [[0.0, 0.0, 2.0]])


def test_conv_net_matches_direct_recomputation():
    layers = [Conv2d(2, 3, 3, 3, pad=1), ReLU(), Conv2d(3, 2, 3, 3, stride=2), Flatten()]
    net = Network(layers, (2, 7, 7), seed=1)
    x = np.random.default_rng(1).standard_normal((2, 2, 7, 7))
    h = np.maximum(oracles.direct_conv(x, net.params["0.weight"], 1, 1), 0.0)
    ref = oracles.direct_conv(h, net.params["2.weight"], 2, 0).reshape(2, -1)
    np.testing.assert_allclose(net.forward(x)[0], ref, atol=1e-12)


def test_cross_entropy_uniform_logits():
    loss, _ = cross_entropy_loss(np.zeros((3, 4)), np.array([0, 1, 3]))
    assert loss == pytest.approx(np.log(4.0))


def test_cross_entropy_gradient_fd():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((5, 4))
    y = rng.integers(0, 4, 5)
    _, g = cross_entropy_loss(z, y)
    h = 1e-6
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        fd = (cross_entropy_loss(zp, y)[0] - cross_entropy_loss(zm, y)[0]) / (2 * h)
        assert g[idx] == pytest.approx(fd, abs=1e-8)


def test_cross_entropy_label_range():
    with pytest.raises(ParameterError):
        cross_entropy_loss(np.zeros((2, 3)), np.array([0, 3]))


def test_linear_input_gradient_is_transpose():
    net = Network([Linear(4, 3, bias=False)], (4,), seed=3)
    x = np.random.default_rng(3).standard_normal((2, 4))
    _, tape = net.forward(x)
    g = np.random.default_rng(4).standard_normal((2, 3))
    layer = net.layers[0]
    dx, _ = layer.backward(net.layer_params(0), tape.caches[0], g)
    np.testing.assert_allclose(dx, g @ net.params["0.weight"], atol=1e-14)


def test_zero_upstream_gives_zero_grads():
    net = Network(desk_cnn((1, 8, 8), 3, (2, 3)), (1, 8, 8))
    _, tape = net.forward(np.random.default_rng(5).standard_normal((2, 1, 8, 8)))
    grads = net.backward(tape, np.zeros((2, 3)))
    assert all(not np.any(g) for g in grads.values())


@pytest.mark.parametrize(
    "layers,shape",
    [
        (desk_cnn((2, 8, 8), 3, (3, 4)), (2, 8, 8)),
        (desk_cnn((1, 8, 8), 3, (2, 3), bias=True), (1, 8, 8)),
        (small_resnet((1, 8, 8), 3, (2, 4), "A"), (1, 8, 8)),
        (small_resnet((1, 8, 8), 3, (2, 4), "B"), (1, 8, 8)),
        (mlp(6, (5,), 3), (6,)),
    ],
    ids=["cnn", "cnn-bias", "resnet-A", "resnet-B", "mlp"],
)
def test_gradients_match_finite_differences(layers, shape):
    net = perturbed(Network(layers, shape, seed=6), seed=6)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4,) + shape)
    y = rng.integers(0, 3, 4)
    assert fd_error(net, x, y) < 1e-4


def test_sgd_step_example():
    params = {"w": np.array([1.0, -2.0])}
    vel = {}
    sgd_step(params, {"w": np.array([0.5, 0.5])}, vel, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_allclose(params["w"], [0.95, -2.05])


def test_sgd_two_step_recurrence():
    lr, mu, wd = 0.1, 0.9, 0.01
    p = np.array([2.0])
    g1, g2 = np.array([1.0]), np.array([-0.5])
    params, vel = {"w": p.copy()}, {}
    sgd_step(params, {"w": g1}, vel, lr, mu, wd)
    sgd_step(params, {"w": g2}, vel, lr, mu, wd)
    v1 = g1 + wd * p
    p1 = p - lr * v1
    v2 = mu * v1 + g2 + wd * p1
    np.testing.assert_allclose(params["w"], p1 - lr * v2, rtol=1e-15)


def test_sgd_no_decay_set():
    params, vel = {"a": np.ones(1), "b": np.ones(1)}, {}
    zero = {"a": np.zeros(1), "b": np.zeros(1)}
    sgd_step(params, zero, vel, lr=1.0, weight_decay=0.5, no_decay={"b"})
    assert params["a"][0] == 0.5 and params["b"][0] == 1.0


def test_batchnorm_output_statistics():
    # with input variance far above eps the normalized output has unit variance
    bn = BatchNorm(3)
    x = 5.0 + 10.0 * np.random.default_rng(7).standard_normal((64, 3, 4, 4))
    y, _ = bn.forward({"weight": np.ones(3), "bias": np.zeros(3)}, bn.init_buffers(), x, True)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-6)


def test_forward_deterministic():
    a = Network(desk_cnn(), (1, 12, 12), seed=8)
    b = Network(desk_cnn(), (1, 12, 12), seed=8)
    x = np.random.default_rng(8).standard_normal((3, 1, 12, 12))
    np.testing.assert_array_equal(a.forward(x)[0], b.forward(x)[0])


def test_stale_tape_raises():
    net = Network(desk_cnn((1, 8, 8), 3, (2, 3)), (1, 8, 8))
    _, tape = net.forward(np.zeros((1, 1, 8, 8)))
    net.mark_updated()
    with pytest.raises(StateError):
        net.backward(tape, np.zeros((1, 3)))


def test_eval_tape_cannot_backprop():
    net = Network(desk_cnn((1, 8, 8), 3, (2, 3)), (1, 8, 8))
    net.eval()
    _, tape = net.forward(np.zeros((1, 1, 8, 8)))
    with pytest.raises(StateError):
        net.backward(tape, np.zeros((1, 3)))


def test_eval_forward_leaves_buffers_alone():
    net = Network(desk_cnn((1, 8, 8), 3, (2, 3)), (1, 8, 8))
    before = {k: v.copy() for k, v in net.buffers.items()}
    net.eval()
    net.forward(np.random.default_rng(9).standard_normal((4, 1, 8, 8)))
    for k, v in net.buffers.items():
        np.testing.assert_array_equal(v, before[k])


def test_predict_restores_mode():
    net = Network(desk_cnn((1, 8, 8), 3, (2, 3)), (1, 8, 8))
    net.train()
    net.predict(np.zeros((2, 1, 8, 8)))
    assert net.training


def test_weight_matrix_round_trip():
    net = Network(desk_cnn(), (1, 12, 12))
    w = net.weight_matrix(4)
    assert w.shape == (32, 16 * 9)
    net.set_weight_matrix(4, 2 * w)
    np.testing.assert_array_equal(net.weight_matrix(4), 2 * w)


def test_avgpool_values():
    net = Network([AvgPool(2), Flatten()], (1, 2, 2))
    assert net.forward(np.arange(4.0).reshape(1, 1, 2, 2))[0].item() == 1.5


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(2, 6), st.floats(-50, 50))
def test_softmax_loss_shift_invariant(n, k, shift):
    rng = np.random.default_rng(n * 10 + k)
    z = rng.standard_normal((n, k))
    y = rng.integers(0, k, n)
    a, ga = cross_entropy_loss(z, y)
    b, gb = cross_entropy_loss(z + shift, y)
    assert a == pytest.approx(b, abs=1e-9)
    np.testing.assert_allclose(ga, gb, atol=1e-12)
    np.testing.assert_allclose(ga.sum(axis=1), 0.0, atol=1e-12)
