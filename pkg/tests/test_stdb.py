import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridsnn.coding import EncoderParams, poisson_encode_batch
from hybridsnn.numerics import DimensionError, NumericError, finite_difference_gradient, softmax
from hybridsnn.spiking import LayerSpec, LifParams, NetworkSpec, simulate_batch
from hybridsnn.stdb import (
    OptimizerParams,
    SurrogateParams,
    calibrate_firing_rates,
    focal_loss,
    focal_loss_logits,
    output_potential_grad,
    sgd_momentum_step,
    spike_cross_entropy_loss,
    stdb_backward,
    surrogate_spike_grad,
    train_stdb,
)

S = SurrogateParams()


def test_cross_entropy_examples():
    assert spike_cross_entropy_loss(np.zeros(2), np.array([1.0, 0]))[0] == pytest.approx(math.log(2))
    assert spike_cross_entropy_loss(np.array([50.0, 0]), np.array([1.0, 0]))[0] < 1e-20
    l, p = spike_cross_entropy_loss(np.array([1.0, 2, 3]), np.array([0, 0, 1.0]))
    assert l == pytest.approx(0.40761, abs=1e-4)
    with pytest.raises(DimensionError):
        spike_cross_entropy_loss(np.zeros(3), np.zeros(2))


def test_cross_entropy_no_underflow():
    l, _ = spike_cross_entropy_loss(np.array([0.0, 1000.0]), np.array([1.0, 0]))
    assert l == pytest.approx(1000.0)


def test_output_grad_examples():
    np.testing.assert_array_equal(output_potential_grad([0.5, 0.5], [1, 0]), [-0.5, 0.5])
    assert np.all(output_potential_grad([0.2, 0.8], [0.2, 0.8]) == 0)


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.integers(0, 5))
def test_output_grad_sums_to_zero_and_matches_fd(u, k):
    u = np.array(u)
    y = np.zeros_like(u)
    y[k % len(u)] = 1
    _, p = spike_cross_entropy_loss(u, y)
    g = output_potential_grad(p, y)
    assert abs(g.sum()) < 1e-12
    fd = finite_difference_gradient(lambda v: spike_cross_entropy_loss(v, y)[0], u, h=1e-6)
    np.testing.assert_allclose(g, fd, atol=1e-7)


def test_surrogate_values():
    assert surrogate_spike_grad(5, 5, S) == pytest.approx(0.3, abs=1e-12)
    assert surrogate_spike_grad(120, 20, S) == pytest.approx(0.110364, abs=1e-6)
    assert surrogate_spike_grad(40, 2, SurrogateParams(0.3, 0.0)) == 0.3
    # never fired: dt = t
    assert surrogate_spike_grad(100, -1, S) == pytest.approx(0.3 * math.exp(-1))


@given(st.integers(0, 200), st.integers(0, 200))
def test_surrogate_positive_and_nonincreasing(a, b):
    lo, hi = sorted((a, b))
    g_lo = surrogate_spike_grad(lo, 0, S)
    g_hi = surrogate_spike_grad(hi, 0, S)
    assert 0 < g_hi <= g_lo <= S.alpha


def test_sgd_step_examples():
    w = np.array([1.0])
    w2, v = sgd_momentum_step(w, np.array([0.5]), np.array([0.0]), OptimizerParams(0.1, 0.95, 0.0005))
    assert v[0] == pytest.approx(0.5005, abs=1e-12)
    assert w2[0] == pytest.approx(0.94995, abs=1e-12)
    w2, _ = sgd_momentum_step(w, np.zeros(1), np.zeros(1), OptimizerParams(0.1, 0.9, 0.0))
    assert w2[0] == 1.0
    w2, _ = sgd_momentum_step(w, np.array([2.0]), np.array([7.0]), OptimizerParams(0.1, 0.0, 0.0))
    assert w2[0] == pytest.approx(0.8)


def test_focal_examples():
    for p in (0.1, 0.5, 0.93):
        assert focal_loss(p, 0.0) == -math.log(p)
    assert focal_loss(1.0, 2.0) == 0.0
    assert focal_loss(0.5, 2.0) == pytest.approx(0.173287, abs=1e-6)
    with pytest.raises(NumericError):
        focal_loss(0.0, 2.0)


@given(st.floats(0.01, 1.0), st.floats(0.0, 5.0))
def test_focal_bounded_by_ce(p, gamma):
    assert 0.0 <= focal_loss(p, gamma) <= -math.log(p) + 1e-15


def test_focal_logits_gradient_fd():
    u = np.array([[0.3, -1.2, 2.0]])
    y = np.array([[0, 1.0, 0]])
    _, g = focal_loss_logits(u, y, 2.0)
    fd = finite_difference_gradient(lambda v: focal_loss_logits(v[None], y, 2.0)[0], u[0], h=1e-6)
    np.testing.assert_allclose(g[0], fd, rtol=1e-6, atol=1e-9)
    l0, g0 = focal_loss_logits(u, y, 0.0)
    lc, p = spike_cross_entropy_loss(u, y)
    assert l0 == pytest.approx(lc)
    np.testing.assert_allclose(g0, p - y, atol=1e-12)


def _linear_net(rng, n_in=5, n_out=3):
    return NetworkSpec((n_in,), [LayerSpec("fc", rng.normal(size=(n_out, n_in)),
                                           rng.normal(size=n_out), learning_tag="backprop")])


def test_output_layer_gradient_matches_outer_sum_and_fd(rng):
    net = _linear_net(rng)
    x = (rng.random((1, 8, 5)) < 0.5).astype(np.float64)
    y = np.array([[0, 1.0, 0]])
    tape = simulate_batch(net, x)
    _, p = spike_cross_entropy_loss(tape.output_potentials, y)
    dW, db = stdb_backward(tape, p - y, net, S)[0]
    np.testing.assert_allclose(dW, np.outer((p - y)[0], x[0].sum(axis=0)), atol=1e-14)

    def loss(flat):
        n = net.copy()
        n.layers[0].weight = flat[:15].reshape(3, 5)
        n.layers[0].bias = flat[15:]
        return spike_cross_entropy_loss(simulate_batch(n, x).output_potentials, y)[0]

    flat = np.concatenate([net.layers[0].weight.ravel(), net.layers[0].bias])
    fd = finite_difference_gradient(loss, flat, h=1e-6)
    an = np.concatenate([dW.ravel(), db])
    np.testing.assert_allclose(an, fd, rtol=1e-5, atol=1e-9)


def test_zero_out_grad_gives_zero_gradients(rng):
    net = NetworkSpec((4,), [LayerSpec("fc", rng.normal(1, 0.5, (6, 4)), lif=LifParams(), learning_tag="backprop"),
                             LayerSpec("fc", rng.normal(size=(2, 6)), learning_tag="backprop")])
    tape = simulate_batch(net, np.ones((2, 5, 4)))
    for g in stdb_backward(tape, np.zeros((2, 2)), net, S):
        assert np.all(g[0] == 0)


def test_hidden_surrogate_hand_chain_rule():
    # 1 input -> 1 LIF neuron (tau 10) -> 1 output, T = 3, constant input 1
    w1, w2, g = 6.0, 0.7, 0.37
    net = NetworkSpec((1,), [LayerSpec("fc", np.array([[w1]]), lif=LifParams(), learning_tag="backprop"),
                             LayerSpec("fc", np.array([[w2]]), learning_tag="backprop")])
    tape = simulate_batch(net, np.ones((1, 3, 1)))
    # v: 0.6, 1.14 (spike, reset), 0.6 -> spikes [0, 1, 0], dt [0, 0, 1]
    np.testing.assert_array_equal(tape.records[0][0, :, 0], [0, 1, 0])
    grads = stdb_backward(tape, np.array([[g]]), net, S)
    hand_w2 = g * (0 + 1 + 0)
    gain, a, b = 0.1, 0.3, 0.01
    hand_w1 = g * w2 * a * gain * (math.exp(-b * 0) * 1 + math.exp(-b * 0) * 1 + math.exp(-b * 1) * 1)
    assert abs(grads[1][0][0, 0] - hand_w2) < 1e-9
    assert abs(grads[0][0][0, 0] - hand_w1) < 1e-9


def test_backward_tape_mismatch(rng):
    net = _linear_net(rng)
    tape = simulate_batch(net, np.ones((1, 3, 5)), record=False)
    with pytest.raises(DimensionError):
        stdb_backward(tape, np.zeros((1, 3)), net, S)


def test_dropout_gates_gradient(rng):
    net = NetworkSpec((4,), [LayerSpec("fc", rng.normal(1, 0.3, (6, 4)), lif=LifParams(), learning_tag="backprop"),
                             LayerSpec("dropout", rate=0.5),
                             LayerSpec("fc", rng.normal(size=(2, 6)), learning_tag="backprop")])
    mask = np.array([1, 0, 1, 0, 1, 0], dtype=np.float64)
    tape = simulate_batch(net, np.ones((1, 6, 4)) * 3, masks={1: mask})
    grads = stdb_backward(tape, np.array([[0.4, -0.4]]), net, S)
    assert np.all(grads[0][0][[1, 3, 5]] == 0)
    assert np.all(grads[2][0][:, [1, 3, 5]] == 0)


def test_train_stdb_learns_separable_task():
    rng = np.random.default_rng(0)
    x = np.zeros((40, 6))
    y = np.arange(40) % 2
    x[y == 0, :3] = 0.9
    x[y == 1, 3:] = 0.9
    net = NetworkSpec((6,), [LayerSpec("fc", rng.normal(0, 0.4, (8, 6)), np.zeros(8), lif=LifParams(),
                                       learning_tag="backprop"),
                             LayerSpec("fc", rng.normal(0, 0.1, (2, 8)), np.zeros(2), learning_tag="backprop")])
    enc = EncoderParams(1.0, 20)
    net = calibrate_firing_rates(net, x, enc, np.random.default_rng(1))
    trained, hist = train_stdb(net, x, y, OptimizerParams(0.01, 0.9, 0.0005, 8), S, enc, 15,
                               np.random.default_rng(2), target_accuracy=1.0)
    assert hist[-1]["accuracy"] >= 0.95
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_calibration_hits_target_rate():
    rng = np.random.default_rng(0)
    x = rng.random((20, 6))
    net = NetworkSpec((6,), [LayerSpec("fc", rng.normal(0, 0.4, (8, 6)), lif=LifParams(), learning_tag="backprop"),
                             LayerSpec("fc", rng.normal(0, 0.1, (2, 8)), learning_tag="backprop")])
    enc = EncoderParams(1.0, 40)
    out = calibrate_firing_rates(net, x, enc, np.random.default_rng(1), 0.1, iters=30)
    rate = simulate_batch(out, poisson_encode_batch(x, enc, np.random.default_rng(5))).records[0].mean()
    assert 0.07 < rate < 0.13
    with pytest.raises(ValueError):
        calibrate_firing_rates(net, x, enc, np.random.default_rng(1), 1.5)
