"""Spike-time-dependent backpropagation.

The output layer integrates potential without spiking, so its gradient is
exact: ``dL/du_T = p - y`` and ``u_T`` is linear in every per-step weight
copy.  Hidden spiking layers replace the derivative of the threshold with
``alpha * exp(-beta * dt)``, ``dt`` being the steps since the neuron's last
spike, and treat the previous potential as a constant input (per-step
truncated chain, no backpropagation through the membrane).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .coding import EncoderParams, poisson_encode_batch
from .numerics import DimensionError, NumericError, col2im, im2col, log_softmax
from .spiking import NetworkSpec, SimulationResult, draw_dropout_mask, simulate_batch, unpool_winner

log = logging.getLogger(__name__)

# A tape is the recorded forward pass.
BackpropTape = SimulationResult


@dataclass
class SurrogateParams:
    alpha: float = 0.3
    beta: float = 0.01

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


@dataclass
class OptimizerParams:
    learning_rate: float = 0.001
    momentum: float = 0.95
    weight_decay: float = 0.0005
    batch_size: int = 32

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def spike_cross_entropy_loss(u_T, y):
    """Softmax cross-entropy on accumulated output potentials.

    ``y`` is one-hot (``[N]`` or ``[B, N]``).  Returns ``(loss, p)``; for a
    batch the loss is the mean.  Computed through log-sum-exp so a tiny
    ``p_true`` cannot underflow to ``log(0)``.
    """
    u = np.asarray(u_T, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if u.shape != y.shape:
        raise DimensionError(f"potentials {u.shape} vs targets {y.shape}")
    logp = log_softmax(u)
    loss = -(y * logp).sum(axis=-1)
    return float(loss.mean()), np.exp(logp)


def output_potential_grad(p, y):
    return np.asarray(p) - np.asarray(y)


def focal_loss(p_t, gamma: float = 2.0) -> float:
    """``-(1 - p_t)^gamma * ln(p_t)``."""
    p_t = float(p_t)
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if not 0.0 <= p_t <= 1.0:
        raise ValueError("p_t must lie in [0, 1]")
    if p_t == 0.0:
        raise NumericError("focal loss is infinite at p_t = 0")
    return -((1.0 - p_t) ** gamma) * np.log(p_t)


def focal_loss_logits(u_T, y, gamma: float = 2.0):
    """Focal loss on potentials; returns ``(mean loss, dL/du)``."""
    u = np.atleast_2d(np.asarray(u_T, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    logp = log_softmax(u)
    p = np.exp(logp)
    logpt = (y * logp).sum(axis=-1)
    pt = np.exp(logpt)
    mod = (1.0 - pt) ** gamma
    loss = -mod * logpt
    # dFL/dpt, written with log(pt) so that pt -> 0 stays finite for gamma >= 1
    with np.errstate(divide="ignore", invalid="ignore"):
        dmod = np.where(gamma > 0, gamma * (1.0 - pt) ** np.maximum(gamma - 1.0, 0.0), 0.0)
    dfl_dpt = dmod * logpt - mod / pt
    grad = (dfl_dpt * pt)[:, None] * (y - p)
    return float(loss.mean()), grad


def surrogate_spike_grad(t, t_s, params: SurrogateParams, T: int | None = None):
    """``alpha * exp(-beta * dt)`` with ``dt = t - t_s``; a neuron that has
    never fired (``t_s < 0``) uses ``dt = t``.  ``dt`` is clamped to [0, T]."""
    t = np.asarray(t)
    t_s = np.asarray(t_s)
    dt = np.where(t_s >= 0, t - t_s, t)
    dt = np.maximum(dt, 0)
    if T is not None:
        dt = np.minimum(dt, T)
    out = params.alpha * np.exp(-params.beta * dt)
    return float(out) if out.ndim == 0 else out


def _weighted_backward(layer, x_seq, delta_seq, need_dx: bool):
    """Gradients of ``sum_t <delta_t, layer(x_t)>`` w.r.t. weight, bias, x.

    ``x_seq`` and ``delta_seq`` are ``[B, T, ...]``.
    """
    B, T = x_seq.shape[:2]
    W = layer.weight
    if layer.kind == "fc":
        x = x_seq.reshape(B * T, -1)
        d = delta_seq.reshape(B * T, -1)
        dW = d.T @ x
        db = d.sum(axis=0) if layer.bias is not None else None
        dx = (d @ W).reshape(x_seq.shape) if need_dx else None
        return dW, db, dx
    C_out = W.shape[0]
    k = W.shape[2]
    x = x_seq.reshape(B * T, *x_seq.shape[2:])
    cols = im2col(x, k, layer.stride, layer.padding)  # BT, P, C_in*k*k
    d = delta_seq.reshape(B * T, C_out, -1).transpose(0, 2, 1)  # BT, P, C_out
    dW = np.einsum("npc,npj->cj", d, cols).reshape(W.shape)
    db = d.sum(axis=(0, 1)) if layer.bias is not None else None
    dx = None
    if need_dx:
        dcols = d @ W.reshape(C_out, -1)
        dx = col2im(dcols, x.shape, k, layer.stride, layer.padding).reshape(x_seq.shape)
    return dW, db, dx


def stdb_backward(tape: BackpropTape, out_grad, net: NetworkSpec, params: SurrogateParams,
                  trainable=None):
    """Per-layer ``(dW, db)`` for ``L`` given ``dL/du_T = out_grad`` (``[B, N]``).

    Gradients are summed over the batch.  Layers not in ``trainable``
    (default: layers tagged ``backprop`` plus the output layer) get ``None``;
    the backward sweep stops once no trainable layer remains below.
    """
    n = len(net.layers)
    if len(tape.records) != n or tape.layer_inputs[n - 1] is None:
        raise DimensionError("tape does not match the network (was it recorded?)")
    out_grad = np.asarray(out_grad, dtype=np.float64)
    if out_grad.ndim == 1:
        out_grad = out_grad[None]
    B = out_grad.shape[0]
    T = tape.T
    if trainable is None:
        trainable = {i for i, l in enumerate(net.layers) if l.learning_tag == "backprop"} | {n - 1}
    lowest = min(trainable) if trainable else n
    grads: list = [None] * n

    out_layer = net.layers[-1]
    delta = np.broadcast_to(out_grad.reshape(B, 1, *out_grad.shape[1:]), (B, T, *out_grad.shape[1:]))
    x_seq = tape.layer_inputs[n - 1].astype(np.float64)
    dW, db, g = _weighted_backward(out_layer, x_seq, delta, need_dx=lowest < n - 1)
    if (n - 1) in trainable:
        grads[n - 1] = (dW, db)

    for i in range(n - 2, lowest - 1, -1):
        l = net.layers[i]
        if l.kind == "dropout":
            if i in tape.masks:
                m = tape.masks[i]
                g = g * (m[:, None] if m.ndim == g.ndim - 1 else m)
        elif l.kind == "avgpool":
            w = l.window
            g = np.repeat(np.repeat(g, w, axis=-2), w, axis=-1) / (w * w)
        elif l.kind == "spike_maxpool":
            g = unpool_winner(g, tape.winners[i], l.window)
        elif l.weighted:
            surr = params.alpha * np.exp(-params.beta * np.clip(tape.delta_t[i], 0, T))
            d_cur = g * surr * l.lif.gain
            dW, db, g = _weighted_backward(l, tape.layer_inputs[i].astype(np.float64), d_cur,
                                           need_dx=i > lowest)
            if i in trainable:
                grads[i] = (dW, db)
    return grads


def sgd_momentum_step(w, grad, velocity, params: OptimizerParams, decay: bool = True):
    """``v' = m v + g + wd w``;  ``w' = w - lr v'``."""
    w = np.asarray(w)
    grad = np.asarray(grad)
    velocity = np.asarray(velocity)
    if not (w.shape == grad.shape == velocity.shape):
        raise DimensionError("w, grad and velocity must share a shape")
    v = params.momentum * velocity + grad
    if decay:
        v = v + params.weight_decay * w
    return (w - params.learning_rate * v).astype(w.dtype), v


def _one_hot(labels, n_classes):
    y = np.zeros((len(labels), n_classes))
    y[np.arange(len(labels)), labels] = 1.0
    return y


def _draw_masks(net: NetworkSpec, batch: int, rng, rate: float | None = None) -> dict:
    masks = {}
    shapes = net.shapes()
    for i, l in enumerate(net.layers):
        r = l.rate if rate is None else rate
        if l.kind == "dropout" and r > 0:
            masks[i] = draw_dropout_mask((batch, *shapes[i]), r, rng)
    return masks


def predict(net: NetworkSpec, images, encoder: EncoderParams, rng, batch_size: int = 64):
    """Accumulated output potentials for each image (dropout off)."""
    images = np.asarray(images)
    out = []
    for s in range(0, len(images), batch_size):
        trains = poisson_encode_batch(images[s:s + batch_size], encoder, rng)
        out.append(simulate_batch(net, trains, record=False).output_potentials)
    return np.concatenate(out, axis=0)


def calibrate_firing_rates(net: NetworkSpec, images, encoder: EncoderParams, rng,
                           target_rate: float = 0.1, layers=None, iters: int = 8,
                           sample: int = 32) -> NetworkSpec:
    """Data-driven init: rescale each hidden weighted layer (default: the
    ``backprop``-tagged ones) until its mean firing rate on a few training
    images is near ``target_rate``.  Layers are handled bottom-up so each one
    sees calibrated input.  Returns a copy.
    """
    if not 0.0 < target_rate < 1.0:
        raise ValueError("target_rate must lie in (0, 1)")
    net = net.copy()
    n = len(net.layers)
    if layers is None:
        layers = [i for i, l in enumerate(net.layers[:-1]) if l.learning_tag == "backprop" and l.weighted]
    images = np.asarray(images)
    pick = rng.choice(len(images), size=min(sample, len(images)), replace=False)
    trains = poisson_encode_batch(images[pick], encoder, rng)
    for i in sorted(layers):
        if i >= n - 1 or not net.layers[i].weighted:
            raise ValueError(f"layer {i} is not a hidden weighted layer")
        lo, hi = None, None
        scale = 1.0
        base_w, base_b = net.layers[i].weight.copy(), net.layers[i].bias
        for _ in range(iters):
            net.layers[i].weight = (base_w * scale).astype(base_w.dtype)
            if base_b is not None:
                net.layers[i].bias = (base_b * scale).astype(base_b.dtype)
            rate = float(simulate_batch(net, trains).records[i].mean())
            applied = scale
            if abs(rate - target_rate) < 0.1 * target_rate:
                break
            if rate < target_rate:
                lo = scale
                scale = scale * 2.0 if hi is None else 0.5 * (scale + hi)
            else:
                hi = scale
                scale = scale * 0.5 if lo is None else 0.5 * (scale + lo)
        log.debug("layer %d scaled by %.3g, rate %.3f", i, applied, rate)
    return net


def train_stdb(net: NetworkSpec, images, labels, opt: OptimizerParams, surrogate: SurrogateParams,
               encoder: EncoderParams, epochs: int, rng: np.random.Generator, loss: str = "ce",
               gamma: float = 2.0, target_accuracy: float | None = None):
    """Minibatch STDB with momentum SGD.  Returns ``(trained net, history)``.

    Only ``backprop``-tagged layers and the output layer learn; weight decay
    is not applied to frozen layers.  ``history`` holds per-epoch mean loss
    and training accuracy (measured on the same forward passes).  With
    ``target_accuracy`` set, training stops after the first epoch reaching it.
    """
    if loss not in ("ce", "focal"):
        raise ValueError(f"unknown loss {loss!r}")
    net = net.copy()
    net.validate()
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = net.shapes()[-1][0]
    n = len(net.layers)
    trainable = {i for i, l in enumerate(net.layers) if l.learning_tag == "backprop"} | {n - 1}
    vel = {}
    for i in trainable:
        l = net.layers[i]
        vel[(i, "w")] = np.zeros_like(l.weight, dtype=np.float64)
        if l.bias is not None:
            vel[(i, "b")] = np.zeros_like(l.bias, dtype=np.float64)
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(len(images))
        tot_loss, correct = 0.0, 0
        for s in range(0, len(perm), opt.batch_size):
            idx = perm[s:s + opt.batch_size]
            B = len(idx)
            trains = poisson_encode_batch(images[idx], encoder, rng)
            masks = _draw_masks(net, B, rng)
            tape = simulate_batch(net, trains, masks=masks)
            u = tape.output_potentials.astype(np.float64)
            if not np.all(np.isfinite(u)):
                raise NumericError("output potentials diverged")
            y = _one_hot(labels[idx], n_classes)
            if loss == "ce":
                lval, p = spike_cross_entropy_loss(u, y)
                g = output_potential_grad(p, y)
            else:
                lval, g = focal_loss_logits(u, y, gamma)
            tot_loss += lval * B
            correct += int((u.argmax(axis=1) == labels[idx]).sum())
            grads = stdb_backward(tape, g / B, net, surrogate, trainable)
            for i in trainable:
                l = net.layers[i]
                dW, db = grads[i]
                l.weight, vel[(i, "w")] = sgd_momentum_step(l.weight, dW, vel[(i, "w")], opt)
                if db is not None:
                    l.bias, vel[(i, "b")] = sgd_momentum_step(l.bias, db, vel[(i, "b")], opt)
        rec = {"epoch": epoch, "loss": tot_loss / len(images), "accuracy": correct / len(images)}
        history.append(rec)
        log.info("epoch %d loss %.4f acc %.3f", epoch, rec["loss"], rec["accuracy"])
        if target_accuracy is not None and rec["accuracy"] >= target_accuracy:
            break
    return net, history
