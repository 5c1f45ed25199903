"""ReLU reference networks and their conversion to rate-coded spiking nets.

An ANN is a :class:`NetworkSpec` without LIF parameters: hidden weighted
layers apply ReLU, ``spike_maxpool`` layers act as ordinary max-pooling, the
last layer is linear.  Conversion rescales the weights so every hidden unit's
activation maps onto a firing rate in [0, 1] and swaps ReLU for a
non-leaky integrate-and-fire neuron with subtractive reset.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    DimensionError,
    avgpool2d,
    col2im,
    conv2d_forward,
    fc_forward,
    im2col,
    log_softmax,
    maxpool2d,
    softmax,
)
from .spiking import LayerSpec, LifParams, NetworkSpec, _window_view, simulate_batch, unpool_winner

log = logging.getLogger(__name__)

CHANNEL_EPS = 1e-6


class ConversionError(ValueError):
    pass


def _check_ann(net: NetworkSpec) -> None:
    if not net.is_ann:
        raise ConversionError("expected an ANN (no LIF parameters)")
    net.validate()


def _relu(x):
    return np.maximum(x, 0.0)


def ann_forward(net: NetworkSpec, x, masks: dict | None = None):
    """Forward pass of a ReLU network.

    ``x`` is one input (``input_shape``) or a batch.  Returns
    ``(output, activations)`` where ``activations[i]`` is the output of layer
    ``i`` (post-ReLU for hidden weighted layers).
    """
    _check_ann(net)
    x = np.asarray(x)
    single = x.shape == net.input_shape
    if single:
        x = x[None]
    if x.shape[1:] != net.input_shape:
        raise DimensionError(f"input {x.shape[1:]} != network input {net.input_shape}")
    masks = masks or {}
    n = len(net.layers)
    acts = []
    h = x
    for i, l in enumerate(net.layers):
        if l.kind == "conv2d":
            h = conv2d_forward(h, l.weight, l.stride, l.padding, l.bias)
        elif l.kind == "fc":
            h = fc_forward(h.reshape(h.shape[0], -1), l.weight, l.bias)
        elif l.kind == "avgpool":
            h = avgpool2d(h, l.window)
        elif l.kind == "spike_maxpool":
            h = maxpool2d(h, l.window)
        elif l.kind == "dropout" and i in masks:
            h = h * masks[i]
        if l.weighted and i < n - 1:
            h = _relu(h)
        acts.append(h)
    out = h
    if single:
        return out[0], [a[0] for a in acts]
    return out, acts


def ann_backward(net: NetworkSpec, x, acts, out_grad, masks: dict | None = None):
    """Backprop through the ReLU network.  Returns ``[(dW, db) or None]``
    per layer, summed over the batch.  ReLU'(0) is taken as 0."""
    x = np.asarray(x)
    masks = masks or {}
    n = len(net.layers)
    grads: list = [None] * n
    g = np.asarray(out_grad)
    for i in range(n - 1, -1, -1):
        l = net.layers[i]
        inp = x if i == 0 else acts[i - 1]
        if l.weighted:
            if i < n - 1:
                g = g * (acts[i] > 0)
            if l.kind == "fc":
                xi = inp.reshape(inp.shape[0], -1)
                dW = g.T @ xi
                db = g.sum(axis=0)
                g = (g @ l.weight).reshape(inp.shape)
            else:
                k = l.weight.shape[2]
                cols = im2col(inp, k, l.stride, l.padding)  # B, P, C*k*k
                gf = g.reshape(g.shape[0], g.shape[1], -1)  # B, C_out, P
                dW = np.einsum("bop,bpk->ok", gf, cols).reshape(l.weight.shape)
                db = gf.sum(axis=(0, 2))
                dcols = np.einsum("bop,ok->bpk", gf, l.weight.reshape(l.weight.shape[0], -1))
                g = col2im(dcols, inp.shape, k, l.stride, l.padding)
            grads[i] = (dW, db if l.bias is not None else None)
        elif l.kind == "avgpool":
            w = l.window
            g = np.repeat(np.repeat(g, w, axis=-2), w, axis=-1) / (w * w)
        elif l.kind == "spike_maxpool":
            winner = np.argmax(_window_view(inp, l.window), axis=-1)
            g = unpool_winner(g, winner, l.window)
        elif l.kind == "dropout" and i in masks:
            g = g * masks[i]
    return grads


def ann_loss_and_grads(net: NetworkSpec, x, y):
    """Mean softmax cross-entropy over the batch and its parameter gradients."""
    out, acts = ann_forward(net, x)
    y = np.asarray(y, dtype=np.int64)
    lp = log_softmax(out)
    loss = float(-lp[np.arange(len(y)), y].mean())
    g = softmax(out)
    g[np.arange(len(y)), y] -= 1.0
    g /= len(y)
    return loss, ann_backward(net, x, acts, g)


def flatten_grads(grads) -> np.ndarray:
    parts = []
    for gr in grads:
        if gr is None:
            continue
        parts.append(np.ravel(gr[0]))
        if gr[1] is not None:
            parts.append(np.ravel(gr[1]))
    return np.concatenate(parts) if parts else np.zeros(0)


def ann_accuracy(net: NetworkSpec, x, y) -> float:
    out, _ = ann_forward(net, x)
    return float(np.mean(np.argmax(out, axis=1) == np.asarray(y)))


def train_ann(net: NetworkSpec, x, y, lr: float = 0.1, epochs: int = 20, batch_size: int = 32,
              rng: np.random.Generator | None = None, momentum: float = 0.9):
    """Plain minibatch SGD with momentum on cross-entropy.  Returns
    ``(trained copy, history)``."""
    _check_ann(net)
    rng = rng if rng is not None else np.random.default_rng(0)
    net = net.copy()
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    vel = {}
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(len(x))
        tot = 0.0
        for s in range(0, len(x), batch_size):
            idx = perm[s:s + batch_size]
            loss, grads = ann_loss_and_grads(net, x[idx], y[idx])
            tot += loss * len(idx)
            for i, gr in enumerate(grads):
                if gr is None:
                    continue
                l = net.layers[i]
                for key, g in (("w", gr[0]), ("b", gr[1])):
                    if g is None:
                        continue
                    v = vel.get((i, key), 0.0) * momentum + g
                    vel[(i, key)] = v
                    if key == "w":
                        l.weight = (l.weight - lr * v).astype(l.weight.dtype)
                    else:
                        l.bias = (l.bias - lr * v).astype(l.bias.dtype)
        history.append({"epoch": epoch, "loss": tot / len(x), "accuracy": ann_accuracy(net, x, y)})
    return net, history


@dataclass
class CalibrationStats:
    """Max activation of every hidden weighted layer, as a layer scalar and
    per output channel.  Keys are layer indices."""

    layer_max: dict
    channel_max: dict

    def __post_init__(self):
        for k, v in self.layer_max.items():
            if v < 0:
                raise ValueError(f"layer {k}: negative maximum")
        for k, v in self.channel_max.items():
            if np.any(np.asarray(v) < 0):
                raise ValueError(f"layer {k}: negative channel maximum")


def calibration_stats(ann: NetworkSpec, data, percentile: float = 100.0,
                      batch_size: int = 256) -> CalibrationStats:
    """Running maxima of hidden activations over ``data`` (``[N, *input]``).

    With ``percentile < 100`` the per-layer and per-channel values are that
    percentile of the activations instead (needs the whole set in memory).
    """
    _check_ann(ann)
    data = np.asarray(data)
    if data.ndim == len(ann.input_shape):
        data = data[None]
    if len(data) == 0:
        raise ValueError("empty calibration set")
    hidden = [i for i in ann.weighted_indices() if i < len(ann.layers) - 1]
    chunks = {i: [] for i in hidden}
    lmax = {i: 0.0 for i in hidden}
    cmax = {i: None for i in hidden}
    for s in range(0, len(data), batch_size):
        _, acts = ann_forward(ann, data[s:s + batch_size])
        for i in hidden:
            a = acts[i]
            per_ch = np.moveaxis(a, 1, 0).reshape(a.shape[1], -1)
            if percentile < 100.0:
                chunks[i].append(per_ch)
                continue
            lmax[i] = max(lmax[i], float(a.max()))
            m = per_ch.max(axis=1)
            cmax[i] = m if cmax[i] is None else np.maximum(cmax[i], m)
    if percentile < 100.0:
        for i in hidden:
            allv = np.concatenate(chunks[i], axis=1)
            lmax[i] = float(np.percentile(allv, percentile))
            cmax[i] = np.percentile(allv, percentile, axis=1)
    return CalibrationStats(lmax, {i: np.asarray(v, dtype=np.float64) for i, v in cmax.items()})


def balance_thresholds(ann: NetworkSpec, calibration_data) -> dict:
    """Per hidden layer: the maximum activation over the calibration set.

    Weights are not touched.  A zero maximum means the layer never activates
    on the calibration data, which is reported as an error.
    """
    stats = calibration_stats(ann, calibration_data)
    for i, v in stats.layer_max.items():
        if v <= 0.0:
            raise ConversionError(f"layer {i}: degenerate threshold 0 (layer silent on calibration set)")
    return dict(stats.layer_max)


def _input_scale(net: NetworkSpec, i: int, scales: dict) -> np.ndarray:
    """Scale of each input unit of weighted layer ``i``: the channel scale of
    the nearest weighted layer below (1 for the network input), expanded to
    the flattened input when ``i`` is an fc layer fed by a feature map."""
    shapes = [net.input_shape] + net.shapes()
    j = i - 1
    while j >= 0 and not net.layers[j].weighted:
        j -= 1
    in_shape = shapes[i]
    if j < 0:
        lam = np.ones(in_shape[0])
    else:
        lam = np.broadcast_to(np.asarray(scales[j], dtype=np.float64), (shapes[j + 1][0],))
    if net.layers[i].kind == "fc" and len(in_shape) == 3:
        lam = np.repeat(lam, in_shape[1] * in_shape[2])
    return lam


def channel_normalize(ann: NetworkSpec, stats: CalibrationStats, mode: str = "channel",
                      eps: float = CHANNEL_EPS) -> NetworkSpec:
    """Rescale weights so each hidden unit's activation divided by its scale
    lies in [0, 1].

    In ``channel`` mode the scale of output channel ``c`` of layer ``l`` is
    its own maximum ``lambda_l[c]`` (at least ``eps``); in ``layer`` mode it is
    the layer maximum.  Incoming weights are multiplied by the scale of the
    input unit and divided by the scale of the output channel, biases are
    divided by the latter.  The output layer only absorbs its input scales,
    so it reproduces the ANN logits.
    """
    if mode not in ("channel", "layer"):
        raise ValueError(f"unknown normalization mode {mode!r}")
    net = ann.copy()
    n = len(net.layers)
    scales = {}
    for i in net.weighted_indices():
        l = net.layers[i]
        lam_in = _input_scale(net, i, scales)
        if i < n - 1:
            if mode == "channel":
                lam_out = np.maximum(np.asarray(stats.channel_max[i], dtype=np.float64), eps)
            else:
                lam_out = np.full(l.weight.shape[0], max(stats.layer_max[i], eps))
        else:
            lam_out = np.ones(l.weight.shape[0])
        scales[i] = lam_out
        W = l.weight.astype(np.float64)
        if l.kind == "fc":
            W = W * lam_in[None, :] / lam_out[:, None]
        else:
            W = W * lam_in[None, :, None, None] / lam_out[:, None, None, None]
        l.weight = W.astype(ann.layers[i].weight.dtype)
        if l.bias is not None:
            l.bias = (l.bias / lam_out).astype(ann.layers[i].bias.dtype)
    return net


def if_neuron(threshold: float = 1.0) -> LifParams:
    """Non-leaky integrate-and-fire with subtractive reset."""
    return LifParams(r_resistance=1.0, tau_m=math.inf, v_threshold=threshold, v_reset=0.0,
                     dt=1.0, reset="subtract")


def convert_ann_to_snn(ann: NetworkSpec, stats: CalibrationStats, mode: str = "channel",
                       T: int = 350) -> NetworkSpec:
    """ReLU network -> spiking network for a ``T``-step window.

    ``channel`` mode normalizes the weights per output channel and uses unit
    thresholds.  ``layer`` mode is plain threshold balancing: weights are
    copied, the threshold of layer ``l`` is its maximum activation relative
    to the maximum of the layer feeding it, and biases are divided by the
    latter.  Max-pooling becomes spike max-pooling.  Every weighted layer is
    tagged ``backprop`` for subsequent fine-tuning.
    """
    _check_ann(ann)
    if T < 1:
        raise ValueError("T must be >= 1")
    for i, l in enumerate(ann.layers):
        if l.kind not in ("conv2d", "fc", "avgpool", "spike_maxpool", "dropout"):
            raise ConversionError(f"layer {i}: cannot convert kind {l.kind!r}")
    for i in ann.weighted_indices()[:-1]:
        if i not in stats.layer_max:
            raise ConversionError(f"no calibration statistics for layer {i}")
    n = len(ann.layers)
    if mode == "channel":
        net = channel_normalize(ann, stats, "channel")
        thresholds = {i: 1.0 for i in net.weighted_indices()}
    elif mode == "layer":
        net = ann.copy()
        thresholds = {}
        prev = 1.0
        for i in net.weighted_indices():
            l = net.layers[i]
            if l.bias is not None:
                l.bias = (l.bias / prev).astype(ann.layers[i].bias.dtype)
            if i < n - 1:
                lam = stats.layer_max[i]
                if lam <= 0.0:
                    raise ConversionError(f"layer {i}: degenerate threshold 0")
                thresholds[i] = lam / prev
                prev = lam
    else:
        raise ValueError(f"unknown conversion mode {mode!r}")
    for i, l in enumerate(net.layers):
        if l.weighted:
            l.learning_tag = "backprop"
            if i < n - 1:
                l.lif = if_neuron(thresholds[i])
    if net.n_params() != ann.n_params():
        raise ConversionError("parameter count changed during conversion")
    log.debug("converted %d layers (%s mode, T=%d)", n, mode, T)
    return net


def rate_error(rates, activations, scale, floor: float = 0.0) -> np.ndarray:
    """Relative error of ``rate * scale`` as an estimate of each analog
    activation; activations at or below ``floor`` are skipped."""
    a = np.asarray(activations, dtype=np.float64)
    r = np.asarray(rates, dtype=np.float64) * np.asarray(scale, dtype=np.float64)
    keep = a > floor
    return np.abs(r[keep] - a[keep]) / a[keep]


def small_channel_stress_test(T: int = 350, n: int = 200, seed: int = 1) -> dict:
    """Two-channel identity layer whose first channel only ever sees small
    activations (log-uniform in [0.001, 0.1]) while the second spans [0, 1].

    Both conversions are driven by the activations as constant input
    currents; returns the mean relative rate error of the small channel
    for each mode.
    """
    rng = np.random.default_rng(seed)
    x = np.stack([10.0 ** rng.uniform(-3.0, -1.0, n), rng.random(n)], axis=1).astype(np.float32)
    x[0] = (0.1, 1.0)  # pin the channel maxima
    eye = np.eye(2, dtype=np.float32)
    ann = NetworkSpec((2,), [LayerSpec("fc", eye.copy(), np.zeros(2, np.float32)),
                             LayerSpec("fc", eye.copy(), np.zeros(2, np.float32))])
    stats = calibration_stats(ann, x)
    trains = np.broadcast_to(x[:, None], (n, T, 2)).copy()
    out = {}
    for mode in ("channel", "layer"):
        snn = convert_ann_to_snn(ann, stats, mode, T)
        rates = simulate_batch(snn, trains).records[0].mean(axis=1)
        scale = stats.channel_max[0][0] if mode == "channel" else stats.layer_max[0]
        out[mode] = float(rate_error(rates[:, 0], x[:, 0], scale).mean())
    return out
