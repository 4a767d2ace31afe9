import math

import numpy as np
import pytest

from oracles import finite_difference
from splitlab.models import (
    DenseLayer,
    Network,
    NonFiniteError,
    OptimizerState,
    backward,
    bottom_network,
    cross_entropy_soft,
    forward,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    top_network,
)
from splitlab.numerics import RngStream, softmax


def identity_net(width=2, activation="identity"):
    return Network([DenseLayer(np.eye(width), np.zeros(width), activation)])


# forward

def test_identity_forward():
    X = RngStream(0).gaussian((5, 2))
    np.testing.assert_array_equal(forward(identity_net(), X).output, X)


def test_relu_clamp():
    np.testing.assert_array_equal(forward(identity_net(activation="relu"), [[-1.0, 2.0]]).output, [[0.0, 2.0]])


def test_two_layer_hand_propagation():
    W1, b1 = np.array([[1.0, -2.0], [0.5, 3.0]]), np.array([0.1, -0.2])
    W2, b2 = np.array([[2.0, 1.0], [-1.0, 0.25]]), np.array([0.0, 1.0])
    net = Network([DenseLayer(W1, b1, "relu"), DenseLayer(W2, b2, "identity")])
    x = [0.3, 0.7]
    # by hand: h = relu([0.3 - 1.4 + 0.1, 0.15 + 2.1 - 0.2]) = [0, 2.05]
    h = [0.0, 2.05]
    want = [2 * h[0] + 1 * h[1] + 0.0, -1 * h[0] + 0.25 * h[1] + 1.0]
    np.testing.assert_allclose(forward(net, [x]).output[0], want, atol=1e-12)


def test_forward_width_mismatch():
    with pytest.raises(ValueError):
        forward(identity_net(), np.zeros((3, 5)))


def test_network_rejects_bad_chain():
    with pytest.raises(ValueError):
        Network([DenseLayer(np.eye(2), np.zeros(2)), DenseLayer(np.eye(3), np.zeros(3))])


def test_default_architectures():
    rng = RngStream(0)
    assert bottom_network(32, rng=rng.child("b")).widths == [32, 64, 16]
    assert top_network(16, 20, rng=rng.child("t")).widths == [16, 32, 20]


def test_glorot_bounds():
    net = Network.init([30, 50], ["identity"], RngStream(0))
    limit = math.sqrt(6 / 80)
    assert np.all(np.abs(net.layers[0].weights) <= limit)
    assert np.all(net.layers[0].bias == 0)


# backward

def test_identity_backward_passes_gradient():
    g = RngStream(1).gaussian((4, 2))
    net = identity_net()
    _, gin = backward(net, forward(net, np.ones((4, 2))), g)
    np.testing.assert_array_equal(gin, g)


def test_zero_grad_out():
    net = Network.init([3, 4, 2], ["relu", "identity"], RngStream(0))
    grads, gin = backward(net, forward(net, RngStream(1).gaussian((5, 3))), np.zeros((5, 2)))
    assert not np.any(gin)
    assert all(not np.any(dw) and not np.any(db) for dw, db in grads)


def test_backward_shape_mismatch():
    net = identity_net()
    with pytest.raises(ValueError):
        backward(net, forward(net, np.ones((3, 2))), np.ones((2, 2)))


@pytest.mark.parametrize("seed", range(25))
def test_gradients_match_finite_differences(seed):
    rng = RngStream(seed)
    net = Network.init([4, 6, 5, 3], ["relu", "relu", "identity"], rng.child("net"))
    for layer in net.layers:
        layer.bias[:] = 0.1 * rng.child(("bias", id(layer))).gaussian(layer.bias.shape)
    X = rng.child("x").gaussian((7, 4))
    T = softmax(rng.child("t").gaussian((7, 3)), axis=1)

    def loss():
        return cross_entropy_soft(forward(net, X).output, T)[0]

    _, dlogits = cross_entropy_soft(forward(net, X).output, T)
    grads, gin = backward(net, forward(net, X), dlogits)

    def rel(a, b):
        return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)

    for layer, (dw, db) in zip(net.layers, grads):
        assert rel(dw, finite_difference(loss, layer.weights)) <= 1e-4
        assert rel(db, finite_difference(loss, layer.bias)) <= 1e-4
    X_var = X.copy()

    def loss_x():
        return cross_entropy_soft(forward(net, X_var).output, T)[0]

    assert rel(gin, finite_difference(loss_x, X_var)) <= 1e-4


def test_backward_does_not_mutate_parameters():
    net = Network.init([3, 4, 2], ["relu", "identity"], RngStream(0))
    before = [p.copy() for p in net.parameters()]
    backward(net, forward(net, np.ones((2, 3))), np.ones((2, 2)))
    for a, b in zip(before, net.parameters()):
        np.testing.assert_array_equal(a, b)


# loss

def test_uniform_logits_loss_is_log_k():
    loss, _ = cross_entropy_soft(np.zeros((3, 5)), np.eye(5)[[0, 2, 4]])
    assert abs(loss - math.log(5)) < 1e-12


def test_softmax_targets_zero_gradient():
    logits = RngStream(0).gaussian((4, 3))
    _, g = cross_entropy_soft(logits, softmax(logits, axis=1))
    assert np.max(np.abs(g)) < 1e-15


def test_two_class_loss():
    loss, _ = cross_entropy_soft([[2.0, 0.0]], [[1.0, 0.0]])
    assert abs(loss - math.log1p(math.exp(-2))) <= 1e-9


def test_loss_rejects_negative_targets():
    with pytest.raises(ValueError):
        cross_entropy_soft([[0.0, 0.0]], [[1.5, -0.5]])


def test_loss_rejects_unnormalised_targets():
    with pytest.raises(ValueError):
        cross_entropy_soft([[0.0, 0.0]], [[1.0, 0.2]])


# optimiser

def test_zero_step_leaves_net():
    net = Network.init([2, 2], ["identity"], RngStream(0))
    before = net.copy()
    sgd_step(net, [(np.zeros((2, 2)), np.zeros(2))], OptimizerState(0.5))
    np.testing.assert_array_equal(net.layers[0].weights, before.layers[0].weights)


def test_scalar_step():
    net = Network([DenseLayer([[1.0]], [0.0])])
    sgd_step(net, [(np.array([[0.5]]), np.array([0.0]))], OptimizerState(1.0))
    assert net.layers[0].weights[0, 0] == 0.5


def test_non_finite_gradient_aborts():
    net = Network([DenseLayer([[1.0]], [0.0])])
    with pytest.raises(NonFiniteError):
        sgd_step(net, [(np.array([[np.nan]]), np.array([0.0]))], OptimizerState(1.0))
    assert net.layers[0].weights[0, 0] == 1.0


def test_inverse_time_schedule():
    opt = OptimizerState(1.0, "inverse-time", decay=0.5)
    assert opt.current_rate() == 1.0
    opt.step = 2
    assert opt.current_rate() == 0.5


def test_quadratic_fit_decreases_to_least_squares():
    rng = RngStream(0)
    x = rng.gaussian(40)
    y = 2.0 * x + 1.0 + 0.1 * rng.child("noise").gaussian(40)
    net = Network([DenseLayer([[0.0]], [0.0])])
    opt = OptimizerState(0.1)
    X = x[:, None]

    def mse():
        r = forward(net, X).output[:, 0] - y
        return float(np.mean(r ** 2)), r

    losses = []
    for _ in range(100):
        loss, r = mse()
        losses.append(loss)
        grad = (2.0 / x.size) * r[:, None]
        grads, _ = backward(net, forward(net, X), grad)
        sgd_step(net, grads, opt)
    assert all(b < a for a, b in zip(losses, losses[1:]))
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    best = float(np.mean((A @ coef - y) ** 2))
    assert abs(losses[-1] - best) < 1e-6
    np.testing.assert_allclose([net.layers[0].weights[0, 0], net.layers[0].bias[0]], coef, atol=1e-3)


# checkpoints

def test_checkpoint_round_trip(tmp_path):
    net = bottom_network(7, 5, 9, RngStream(3))
    path = tmp_path / "bottom.slmd"
    save_checkpoint(net, path)
    blob = path.read_bytes()
    assert blob[:4] == b"SLMD"
    back = load_checkpoint(path)
    assert back.widths == net.widths
    for a, b in zip(net.parameters(), back.parameters()):
        np.testing.assert_array_equal(a, b)
    assert [l.activation for l in back.layers] == [l.activation for l in net.layers]


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "x.slmd"
    path.write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(ValueError):
        load_checkpoint(path)
    net = bottom_network(3, 2, 4, RngStream(0))
    save_checkpoint(net, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(path)
