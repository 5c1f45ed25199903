import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridsnn.coding import EncoderParams
from hybridsnn.config import ExperimentConfig, build_network
from hybridsnn.data import generate_synthetic_patterns
from hybridsnn.numerics import make_rng
from hybridsnn.spiking import LayerSpec, LifParams, NetworkSpec
from hybridsnn.stdp import (
    LayerwiseSchedule,
    Stage,
    StdpParams,
    apply_cross_depth_inhibition,
    nearest_pairing_ltp,
    stdp_convergence_score,
    stdp_delta,
    stdp_sample_update,
    train_stdp_layerwise,
)

P = StdpParams()


def test_delta_vanishes_at_bounds():
    for t_pre, t_post in [(0, 5), (5, 0), (3, 3)]:
        assert stdp_delta(0.0, t_pre, t_post, P) == 0.0
        assert stdp_delta(1.0, t_pre, t_post, P) == 0.0


def test_delta_ltp_value():
    assert stdp_delta(0.5, 2, 5, P) == pytest.approx(0.001, abs=1e-15)
    assert stdp_delta(0.5, 6, 5, P) == pytest.approx(-0.00075, abs=1e-15)


def test_delta_rejects_out_of_bounds():
    with pytest.raises(ValueError):
        stdp_delta(1.2, 0, 1, P)


@given(st.floats(0, 1), st.integers(0, 50), st.integers(0, 50))
def test_delta_keeps_weight_in_bounds(w, a, b):
    w2 = w + stdp_delta(w, a, b, P)
    assert 0.0 <= w2 <= 1.0


def test_cross_depth_inhibition():
    s = np.zeros((2, 3, 3))
    v = np.zeros((2, 3, 3))
    np.testing.assert_array_equal(apply_cross_depth_inhibition(s, v), s)
    s[0, 2, 2] = 1
    np.testing.assert_array_equal(apply_cross_depth_inhibition(s, v), s)
    s[:, 1, 1] = 1
    v[0, 1, 1], v[1, 1, 1] = 0.9, 1.1
    out = apply_cross_depth_inhibition(s, v)
    assert out[1, 1, 1] == 1 and out[0, 1, 1] == 0 and out[0, 2, 2] == 1
    v[:, 1, 1] = 1.0
    out = apply_cross_depth_inhibition(s, v)
    assert out[0, 1, 1] == 1 and out[1, 1, 1] == 0


def test_convergence_score_examples():
    assert stdp_convergence_score(np.zeros(4), P) == 0.0
    assert stdp_convergence_score(np.full(4, 0.5), P) == 1.0
    assert stdp_convergence_score(np.array([0, 0.5, 1]), P) == pytest.approx(1 / 3)


def test_nearest_pairing():
    pre = np.zeros((1, 6, 1))
    pre[0, 1, 0] = 1
    pre[0, 5, 0] = 1
    # t=0 nearest is after (1); t=1..3 nearest before; t=4 nearest is 5 (after); t=5 coincident
    np.testing.assert_array_equal(nearest_pairing_ltp(pre)[0, :, 0], [0, 1, 1, 1, 0, 1])
    assert nearest_pairing_ltp(np.zeros((1, 4, 2))).sum() == 0


def _fc_net(w):
    return NetworkSpec((3,), [LayerSpec("fc", np.asarray(w, np.float32), lif=LifParams(),
                                        learning_tag="stdp"),
                              LayerSpec("fc", np.ones((1, 2), np.float32))])


def test_fc_update_matches_hand_pairing():
    # input 0 fires every step, input 1 never, input 2 only at the end
    T = 6
    x = np.zeros((1, T, 3), np.float32)
    x[0, :, 0] = 1
    x[0, T - 1, 2] = 1
    net = _fc_net([[0.5, 0.5, 0.5], [0.0, 0.0, 0.0]])
    d = stdp_sample_update(net, 0, x, P, learn=False)
    # neuron 0: v_t with current 0.5 per step (tau 10): never reaches 1 -> run the hand sim
    v, posts = 0.0, []
    for t in range(T):
        v = 0.9 * v + 0.1 * (0.5 + 0.5 * x[0, t, 2])
        posts.append(v > 1)
        if v > 1:
            v = 0.0
    assert not any(posts)
    assert np.all(d == 0)
    # neuron 0 driven only by input 0, low threshold so it fires
    strong = _fc_net([[1.0, 0.5, 0.5], [0, 0, 0]])
    strong.layers[0].lif = LifParams(v_threshold=0.05)
    d = stdp_sample_update(strong, 0, x, P, learn=False)
    W = strong.layers[0].weight.astype(np.float64)
    s = P.stabilizer(W)
    v = 0.0
    ltp = nearest_pairing_ltp(x.astype(float))[0]
    ref = np.zeros((2, 3))
    for t in range(T):
        v = 0.9 * v + 0.1 * (1.0 + 0.5 * x[0, t, 2])
        if v > 0.05:
            v = 0.0
            ref[0] += np.where(ltp[t] > 0, P.a_ltp, -P.a_ltd)
    np.testing.assert_allclose(d, s * ref, atol=1e-15)
    assert d[0, 0] == 0.0  # w = 1 is a bound


def _toy(seed=42):
    cfg = ExperimentConfig(seed=seed)
    x, _ = generate_synthetic_patterns(6, 12, 0.1, seed)
    return cfg, x[:, None], build_network(cfg, make_rng(seed, 1))


def test_zero_budget_leaves_weights_unchanged():
    cfg, x, net = _toy()
    sched = LayerwiseSchedule([Stage(0, 0)])
    out = train_stdp_layerwise(net, x, sched, P, EncoderParams(1.0, 20), np.random.default_rng(0))
    np.testing.assert_array_equal(out.layers[0].weight, net.layers[0].weight)


def test_empty_stream_and_untagged_errors():
    cfg, x, net = _toy()
    sched = LayerwiseSchedule.for_network(net, 4)
    with pytest.raises(ValueError):
        train_stdp_layerwise(net, x[:0], sched, P, EncoderParams(), np.random.default_rng(0))
    bare = _fc_net(np.full((2, 3), 0.5))
    bare.layers[0].learning_tag = "frozen"
    with pytest.raises(ValueError):
        train_stdp_layerwise(bare, np.ones((2, 3)), LayerwiseSchedule(), P, EncoderParams(),
                             np.random.default_rng(0))


def test_layerwise_freeze_threshold_and_bounds():
    cfg, x, net = _toy()
    scores = []
    sched = LayerwiseSchedule.for_network(net, len(x), 0.5)
    out = train_stdp_layerwise(net, x, sched, P, EncoderParams(1.0, 30), np.random.default_rng(3),
                               batch_size=6, epochs=3,
                               on_epoch=lambda s, e, n: scores.append(stdp_convergence_score(
                                   n.layers[0].weight, P)))
    w = out.layers[0].weight
    assert np.all((w >= 0) & (w <= 1))
    assert not np.array_equal(w, net.layers[0].weight)
    assert out.layers[0].inhibition is False
    assert out.layers[0].lif.v_threshold == pytest.approx(0.5 * net.layers[0].lif.v_threshold)
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    # the input net is untouched
    assert net.layers[0].lif.v_threshold == 4.0


def test_two_stage_freeze_contract():
    rng = np.random.default_rng(0)
    net = NetworkSpec((6,), [
        LayerSpec("fc", rng.uniform(0.3, 0.9, (5, 6)).astype(np.float32), lif=LifParams(v_threshold=0.3),
                  learning_tag="stdp"),
        LayerSpec("fc", rng.uniform(0.3, 0.9, (4, 5)).astype(np.float32), lif=LifParams(v_threshold=0.3),
                  learning_tag="stdp"),
        LayerSpec("fc", np.ones((2, 4), np.float32))])
    x = rng.random((8, 6))
    snaps = []

    def hook(stage, epoch, n):
        snaps.append((stage.layer, n.layers[0].weight.copy()))

    train_stdp_layerwise(net, x, LayerwiseSchedule.for_network(net, 8), P, EncoderParams(1.0, 20),
                         np.random.default_rng(1), batch_size=4, epochs=2, on_epoch=hook)
    stage1 = [w for l, w in snaps if l == 1]
    after0 = [w for l, w in snaps if l == 0][-1]
    for w in stage1:
        np.testing.assert_array_equal(w, after0)
