"""Soft-bounded STDP with cross-depth inhibition and layer-wise training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .coding import EncoderParams, poisson_encode_batch
from .numerics import avgpool2d, conv2d_forward, fc_forward, im2col
from .spiking import (
    LifParams,
    LifState,
    NetworkSpec,
    _cross_depth_winners,
    _lif_update,
    spike_maxpool,
)

log = logging.getLogger(__name__)


@dataclass
class StdpParams:
    a_ltp: float = 0.004
    a_ltd: float = 0.003
    w_lb: float = 0.0
    w_ub: float = 1.0

    def __post_init__(self):
        if not self.w_lb < self.w_ub:
            raise ValueError("w_lb must be below w_ub")
        if self.a_ltp <= 0 or self.a_ltd <= 0:
            raise ValueError("learning rates must be positive")

    def stabilizer(self, w):
        return (w - self.w_lb) * (self.w_ub - w)


@dataclass
class Stage:
    layer: int
    samples: int
    threshold_scale: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.threshold_scale <= 1.0:
            raise ValueError("threshold_scale must lie in (0, 1]")


@dataclass
class LayerwiseSchedule:
    stages: list = field(default_factory=list)

    @classmethod
    def for_network(cls, net: NetworkSpec, samples: int, threshold_scale: float = 0.5):
        idx = [i for i, l in enumerate(net.layers) if l.learning_tag == "stdp"]
        return cls([Stage(i, samples, threshold_scale) for i in idx])


def stdp_delta(w, t_pre, t_post, params: StdpParams):
    """Weight change of one pre/post pairing.

    Pre at or before post potentiates, pre after post depresses; both are
    scaled by the soft-bound stabilizer and vanish at the bounds.
    """
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < params.w_lb) or np.any(w > params.w_ub):
        raise ValueError("weight outside [w_lb, w_ub]")
    s = params.stabilizer(w)
    ltp = (np.asarray(t_pre) - np.asarray(t_post)) <= 0
    out = np.where(ltp, params.a_ltp * s, -params.a_ltd * s)
    return float(out) if out.ndim == 0 else out


def apply_cross_depth_inhibition(layer_spikes, potentials):
    """Winner-take-all across channels at each (h, w) of a ``[C, H, W]`` map.

    Only the spiking channel with the highest potential survives at a site;
    sites with at most one spiking channel are untouched.
    """
    s = np.asarray(layer_spikes)
    return _cross_depth_winners(s > 0, np.asarray(potentials)).astype(s.dtype)


def stdp_convergence_score(weights, params: StdpParams) -> float:
    """1 when every weight sits mid-range, 0 when all sit on a bound."""
    w = np.asarray(weights, dtype=np.float64)
    half = (params.w_ub - params.w_lb) / 2.0
    return float(np.mean(params.stabilizer(w) / half**2))


def nearest_pairing_ltp(pre: np.ndarray) -> np.ndarray:
    """For every step t and input j of a ``[B, T, ...]`` pre-spike record:
    1 if the pre-spike nearest to t is at or before t (LTP), 0 if it lies
    after t or the input never fires (LTD)."""
    B, T = pre.shape[:2]
    fired = pre > 0
    big = 2 * T + 1
    steps = np.arange(T).reshape(1, T, *([1] * (pre.ndim - 2)))
    last = np.where(fired, steps, -big)
    last = np.maximum.accumulate(last, axis=1)
    nxt = np.where(fired, steps, 2 * big)
    nxt = np.flip(np.minimum.accumulate(np.flip(nxt, axis=1), axis=1), axis=1)
    d_prev = steps - last
    d_next = nxt - steps
    return ((d_prev <= d_next) & (d_prev <= T)).astype(np.float64)


def _stdp_weight_update(layer, ltp, post, v_pre, params: StdpParams, eligible=None) -> np.ndarray:
    """Soft-bounded update for one step of a batch.

    ``ltp`` marks inputs whose nearest spike precedes (or coincides with)
    the post-spike.  An fc synapse updates once per post-spike.  Conv kernels
    are shared, so per sample and channel only the spiking site with the
    highest potential updates the kernel, from its own receptive field, and
    only channels still ``eligible`` (``[B, C_out]``) take part.
    """
    W = layer.weight.astype(np.float64)
    s = params.stabilizer(W)
    if layer.kind == "fc":
        x = ltp.reshape(ltp.shape[0], -1)
        n_post = post.sum(axis=0)  # [out]
        n_ltp = post.T @ x  # [out, in]
        return s * (params.a_ltp * n_ltp - params.a_ltd * (n_post[:, None] - n_ltp))
    B = post.shape[0]
    C_out = W.shape[0]
    k = W.shape[2]
    cols = im2col(ltp, k, layer.stride, layer.padding)  # B, P, C_in*k*k
    p = post.reshape(B, C_out, -1) > 0
    score = np.where(p, v_pre.reshape(B, C_out, -1), -np.inf)
    site = np.argmax(score, axis=2)  # B, C_out
    active = p.any(axis=2)  # B, C_out
    if eligible is not None:
        active &= eligible
        eligible &= ~active
    patch = cols[np.arange(B)[:, None], site]  # B, C_out, C_in*k*k
    dw = active[..., None] * (params.a_ltp * patch - params.a_ltd * (1.0 - patch))
    return s * dw.sum(axis=0).reshape(W.shape)


def stdp_sample_update(net: NetworkSpec, layer_idx: int, inputs: np.ndarray, params: StdpParams,
                       learn: bool = True) -> np.ndarray:
    """Present ``inputs`` (``[B, T, *grid]``) and compute the STDP update of
    one layer.

    The window is simulated with the weights held fixed; afterwards every
    post-spike is paired with the nearest spike of each presynaptic input.
    Layers before ``layer_idx`` run as they are (frozen).  Returns the
    unclipped summed update; with ``learn=True`` it is also applied (clamped
    to the bounds).
    """
    layer = net.layers[layer_idx]
    B, T = inputs.shape[:2]
    if layer_idx > 0:
        pre = _simulate_prefix(NetworkSpec(net.input_shape, net.layers[:layer_idx]), inputs)
    else:
        pre = inputs.astype(np.float32)
    shape = _output_shape(layer, pre.shape[2:])
    state = LifState.zeros((B, *shape), v0=layer.lif.v_reset, dtype=np.float64)
    W = layer.weight.astype(np.float64)
    ltp = nearest_pairing_ltp(pre)
    total = np.zeros_like(W)
    # conv channels learn from their first firing in the window only
    eligible = np.ones((B, W.shape[0]), dtype=bool) if layer.kind == "conv2d" else None
    for t in range(T):
        x = pre[:, t].astype(np.float64)
        if layer.kind == "conv2d":
            cur = conv2d_forward(x, W, layer.stride, layer.padding, layer.bias)
        else:
            cur = fc_forward(x.reshape(B, -1), W, layer.bias)
        post, state.v, state.last_spike, v_pre = _lif_update(
            state.v, state.last_spike, cur, layer.lif, t,
            inhibit=layer.inhibition and layer.kind == "conv2d", return_pre=True)
        if post.any():
            total += _stdp_weight_update(layer, ltp[:, t], post, v_pre, params, eligible)
    if learn:
        layer.weight = np.clip(W + total, params.w_lb, params.w_ub).astype(layer.weight.dtype)
    return total


def _output_shape(layer, in_shape):
    tmp = NetworkSpec(in_shape, [layer])
    return tmp.shapes()[0]


def _simulate_prefix(pre_net: NetworkSpec, inputs: np.ndarray) -> np.ndarray:
    """Output spikes of the last layer of ``pre_net`` (no output-layer rule)."""
    B, T = inputs.shape[:2]
    x = inputs.astype(np.float32)
    states = {}
    out = np.zeros((B, T, *pre_net.shapes()[-1]), dtype=np.float32)
    for t in range(T):
        h = x[:, t]
        for i, l in enumerate(pre_net.layers):
            h = _frozen_layer_step(l, h, states, i, t)
        out[:, t] = h
    return out


def _frozen_layer_step(l, h, states, i, t):
    if l.weighted:
        if l.kind == "conv2d":
            cur = conv2d_forward(h, l.weight, l.stride, l.padding, l.bias)
        else:
            cur = fc_forward(h.reshape(h.shape[0], -1), l.weight, l.bias)
        st = states.get(i)
        if st is None:
            st = states[i] = LifState.zeros(cur.shape, v0=l.lif.v_reset, dtype=cur.dtype)
        out, st.v, st.last_spike = _lif_update(st.v, st.last_spike, cur, l.lif, t,
                                               inhibit=l.inhibition and l.kind == "conv2d")
        return out
    if l.kind == "avgpool":
        return avgpool2d(h, l.window)
    if l.kind == "spike_maxpool":
        acc = states.get(i)
        if acc is None:
            acc = np.zeros_like(h)
        out, states[i], _ = spike_maxpool(h, acc, l.window)
        return out
    return h


def train_stdp_layerwise(net: NetworkSpec, images, schedule: LayerwiseSchedule, params: StdpParams,
                         encoder: EncoderParams, rng: np.random.Generator, batch_size: int = 1,
                         epochs: int = 1, on_epoch=None) -> NetworkSpec:
    """Greedy layer-by-layer STDP.

    During stage k layer k learns with cross-depth inhibition on.  When the
    stage ends its weights freeze, its inhibition is switched off and its
    threshold is multiplied by ``threshold_scale`` so it drives the next
    layer harder.  ``on_epoch(stage, epoch, net)`` is called after each epoch.
    Returns a trained copy; ``net`` itself is not modified.
    """
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise ValueError("empty data stream")
    if not any(l.learning_tag == "stdp" for l in net.layers):
        raise ValueError("network has no stdp-tagged layer")
    net = net.copy()
    order = [st.layer for st in schedule.stages]
    if order != sorted(order):
        raise ValueError("schedule stages must follow layer order")
    for stage in schedule.stages:
        layer = net.layers[stage.layer]
        if layer.learning_tag != "stdp":
            raise ValueError(f"layer {stage.layer} is not stdp-tagged")
        layer.inhibition = layer.kind == "conv2d"
        for epoch in range(epochs):
            seen = 0
            perm = rng.permutation(images.shape[0])
            while seen < stage.samples:
                take = perm[seen % len(perm):][: min(batch_size, stage.samples - seen)]
                if len(take) == 0:
                    break
                trains = poisson_encode_batch(images[take], encoder, rng)
                stdp_sample_update(net, stage.layer, trains, params, learn=True)
                seen += len(take)
            if on_epoch is not None:
                on_epoch(stage, epoch, net)
            log.debug("stage %d epoch %d score %.4f", stage.layer, epoch,
                      stdp_convergence_score(layer.weight, params))
        layer.inhibition = False
        lif = layer.lif
        layer.lif = LifParams(lif.r_resistance, lif.tau_m, lif.v_reset + (lif.v_threshold - lif.v_reset)
                              * stage.threshold_scale, lif.v_reset, lif.dt, lif.reset)
    return net
