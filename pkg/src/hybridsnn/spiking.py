"""Clock-driven LIF dynamics and layered spike-train simulation.

Potentials live on a normalized scale (reset 0, threshold 1 by default).
The physiological values of the reference neuron (reset -80, threshold -40)
map onto it affinely, see :func:`to_normalized_potential`.

The simulator is batched internally: inputs are ``[B, T, *grid]`` arrays and
every layer keeps ``[B, *shape]`` state.  :func:`forward_simulate` is the
single-sample convenience wrapper.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    DimensionError,
    NumericError,
    avgpool2d,
    conv2d_forward,
    conv_output_size,
    fc_forward,
)

LAYER_KINDS = ("conv2d", "fc", "avgpool", "spike_maxpool", "dropout")
LEARNING_TAGS = ("stdp", "backprop", "frozen")

# Reference neuron, millivolt convention.
TABLE_V_THRESHOLD_MV = -40.0
TABLE_V_RESET_MV = -80.0


def to_normalized_potential(v_mv, v_reset_mv=TABLE_V_RESET_MV, v_threshold_mv=TABLE_V_THRESHOLD_MV):
    """Affine map mV -> normalized units: reset -> 0, threshold -> 1."""
    return (np.asarray(v_mv, dtype=float) - v_reset_mv) / (v_threshold_mv - v_reset_mv)


def to_millivolts(v_norm, v_reset_mv=TABLE_V_RESET_MV, v_threshold_mv=TABLE_V_THRESHOLD_MV):
    return np.asarray(v_norm, dtype=float) * (v_threshold_mv - v_reset_mv) + v_reset_mv


@dataclass
class LifParams:
    """Leaky integrate-and-fire constants.

    ``tau_m=inf`` turns the leak off; the input then charges the membrane as
    ``v += R * dt * I`` (integrate-and-fire, used by converted networks).
    ``reset`` is ``"value"`` (set to ``v_reset``) or ``"subtract"`` (remove
    one threshold's worth of charge).
    """

    r_resistance: float = 1.0
    tau_m: float = 10.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    dt: float = 1.0
    reset: str = "value"

    def __post_init__(self):
        if not self.tau_m > 0:
            raise ValueError("tau_m must be > 0")
        if not self.v_reset < self.v_threshold:
            raise ValueError("v_reset must be below v_threshold")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.reset not in ("value", "subtract"):
            raise ValueError(f"unknown reset mode {self.reset!r}")

    @property
    def decay(self) -> float:
        if math.isinf(self.tau_m):
            return 1.0
        return 1.0 - self.dt / self.tau_m

    @property
    def gain(self) -> float:
        if math.isinf(self.tau_m):
            return self.r_resistance * self.dt
        return self.r_resistance * self.dt / self.tau_m

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        if math.isinf(self.tau_m):
            d["tau_m"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LifParams":
        d = dict(d)
        if d.get("tau_m") == "inf":
            d["tau_m"] = math.inf
        return cls(**d)


@dataclass
class LifState:
    v: np.ndarray
    last_spike: np.ndarray  # -1 = never spiked
    t: int = 0

    @classmethod
    def zeros(cls, shape, v0: float = 0.0, dtype=np.float32) -> "LifState":
        return cls(np.full(shape, v0, dtype=dtype), np.full(shape, -1, dtype=np.int64), 0)


def _cross_depth_winners(fired: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Keep, per spatial site, only the spiking channel with the highest
    potential (lowest channel on ties).  Channel axis is -3."""
    masked = np.where(fired, v, -np.inf)
    winner = np.argmax(masked, axis=-3)
    keep = np.zeros_like(fired)
    np.put_along_axis(keep, winner[..., None, :, :], True, axis=-3)
    return keep & fired


def _lif_update(v, last_spike, current, params: LifParams, t: int, inhibit: bool = False,
                return_pre: bool = False):
    current = np.asarray(current)
    if not np.all(np.isfinite(current)):
        raise NumericError("non-finite input current")
    v = params.decay * v + params.gain * current
    v = v.astype(current.dtype if current.dtype.kind == "f" else v.dtype, copy=False)
    v_pre = v
    fired = v > params.v_threshold
    if inhibit:
        spikes = _cross_depth_winners(fired, v)
    else:
        spikes = fired
    if params.reset == "value":
        v = np.where(fired, np.asarray(params.v_reset, dtype=v.dtype), v)
    else:
        v = v - spikes * np.asarray(params.v_threshold - params.v_reset, dtype=v.dtype)
        if inhibit:
            v = np.where(fired & ~spikes, np.asarray(params.v_reset, dtype=v.dtype), v)
    last_spike = np.where(spikes, t, last_spike)
    if return_pre:
        return spikes.astype(v.dtype), v, last_spike, v_pre
    return spikes.astype(v.dtype), v, last_spike


def lif_step(state: LifState, input_current, params: LifParams):
    """One Euler step of ``tau dv/dt = -v + R I`` followed by the reset rule.

    Returns ``(spikes, new_state)``; the old state is left untouched.
    """
    current = np.asarray(input_current)
    if current.shape != state.v.shape:
        raise DimensionError(f"current {current.shape} vs state {state.v.shape}")
    spikes, v, last = _lif_update(state.v, state.last_spike, current, params, state.t)
    return spikes, LifState(v, last, state.t + 1)


def accumulate_output_potential(u_prev, weights, spikes, bias=None):
    """``u + W o``; output neurons integrate without ever firing."""
    u_prev = np.asarray(u_prev)
    y = fc_forward(spikes, weights, bias)
    if y.shape != u_prev.shape:
        raise DimensionError(f"potential shape {u_prev.shape} vs W.o {y.shape}")
    return u_prev + y


def _window_view(x: np.ndarray, window: int) -> np.ndarray:
    """``[..., H, W] -> [..., H/w, W/w, w*w]`` (row-major inside the window)."""
    H, W = x.shape[-2:]
    if window < 1 or H % window or W % window:
        raise DimensionError(f"window {window} does not divide {H}x{W}")
    lead = x.shape[:-2]
    b = x.reshape(*lead, H // window, window, W // window, window)
    b = np.moveaxis(b, -3, -2)
    return b.reshape(*lead, H // window, W // window, window * window)


def spike_maxpool(window_spikes, accumulators, window: int):
    """Max-pool by accumulated spike count.

    The accumulators absorb the current spikes first, then each window
    forwards the spikes of its highest-count unit (lowest flat index wins
    ties).  Returns ``(pooled, accumulators', winner_index)``.
    """
    s = np.asarray(window_spikes)
    acc = np.asarray(accumulators) + s
    acc_w = _window_view(acc, window)
    winner = np.argmax(acc_w, axis=-1)
    s_w = _window_view(s, window)
    pooled = np.take_along_axis(s_w, winner[..., None], axis=-1)[..., 0]
    return pooled, acc, winner


def unpool_winner(grad_pooled: np.ndarray, winner: np.ndarray, window: int) -> np.ndarray:
    """Route pooled gradients back to the winning unit of each window."""
    lead = grad_pooled.shape[:-2]
    Ho, Wo = grad_pooled.shape[-2:]
    g = np.zeros((*lead, Ho, Wo, window * window), dtype=grad_pooled.dtype)
    np.put_along_axis(g, winner[..., None], grad_pooled[..., None], axis=-1)
    g = g.reshape(*lead, Ho, Wo, window, window)
    g = np.moveaxis(g, -2, -3)
    return g.reshape(*lead, Ho * window, Wo * window)


def apply_dropout_mask(activity, mask):
    activity = np.asarray(activity)
    mask = np.asarray(mask)
    if mask.shape != activity.shape:
        raise DimensionError(f"mask {mask.shape} vs activity {activity.shape}")
    return activity * mask


def draw_dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Keep-mask with ``P(keep) = 1 - rate``; fixed for all T steps of one pass."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    return (rng.random(shape) >= rate).astype(dtype)


@dataclass
class LayerSpec:
    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    window: int = 2
    rate: float = 0.0
    lif: LifParams | None = None
    learning_tag: str = "frozen"
    inhibition: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.learning_tag not in LEARNING_TAGS:
            raise ValueError(f"unknown learning tag {self.learning_tag!r}")

    @property
    def weighted(self) -> bool:
        return self.kind in ("conv2d", "fc")

    def config_dict(self) -> dict:
        """Everything but the arrays (those go to checkpoint entries)."""
        d = {"kind": self.kind, "learning_tag": self.learning_tag}
        if self.kind == "conv2d":
            d.update(stride=self.stride, padding=self.padding)
        if self.kind in ("avgpool", "spike_maxpool"):
            d["window"] = self.window
        if self.kind == "dropout":
            d["rate"] = self.rate
        if self.lif is not None:
            d["lif"] = self.lif.to_dict()
        if self.inhibition:
            d["inhibition"] = True
        return d


@dataclass
class NetworkSpec:
    """Ordered layers applied to inputs of ``input_shape``.

    The last layer is the output layer: weighted, without LIF parameters,
    integrating potential instead of spiking.  In an ANN checkpoint no layer
    carries LIF parameters and hidden weighted layers are ReLU.
    """

    input_shape: tuple
    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)

    def copy(self) -> "NetworkSpec":
        return copy.deepcopy(self)

    @property
    def is_ann(self) -> bool:
        return all(l.lif is None for l in self.layers)

    def weighted_indices(self) -> list:
        return [i for i, l in enumerate(self.layers) if l.weighted]

    def n_params(self) -> int:
        n = 0
        for l in self.layers:
            if l.weight is not None:
                n += l.weight.size
            if l.bias is not None:
                n += l.bias.size
        return n

    def shapes(self) -> list:
        """Output shape of every layer; raises DimensionError if inconsistent."""
        shape = self.input_shape
        out = []
        for i, l in enumerate(self.layers):
            if l.kind == "conv2d":
                if len(shape) != 3 or l.weight is None or l.weight.ndim != 4:
                    raise DimensionError(f"layer {i}: conv2d needs [C,H,W] input and 4-D weight")
                C_out, C_in, k, _ = l.weight.shape
                if C_in != shape[0]:
                    raise DimensionError(f"layer {i}: conv expects {C_in} channels, got {shape[0]}")
                H = conv_output_size(shape[1], k, l.stride, l.padding)
                W = conv_output_size(shape[2], k, l.stride, l.padding)
                if H < 1 or W < 1:
                    raise DimensionError(f"layer {i}: kernel larger than input")
                shape = (C_out, H, W)
            elif l.kind == "fc":
                n_in = int(np.prod(shape))
                if l.weight is None or l.weight.ndim != 2 or l.weight.shape[1] != n_in:
                    raise DimensionError(f"layer {i}: fc weight does not accept {n_in} inputs")
                shape = (l.weight.shape[0],)
            elif l.kind in ("avgpool", "spike_maxpool"):
                if len(shape) != 3 or shape[1] % l.window or shape[2] % l.window:
                    raise DimensionError(f"layer {i}: pool window {l.window} does not divide {shape}")
                shape = (shape[0], shape[1] // l.window, shape[2] // l.window)
            if l.bias is not None and l.weighted and l.bias.shape != (shape[0],):
                raise DimensionError(f"layer {i}: bias shape {l.bias.shape}")
            out.append(shape)
        return out

    def validate(self) -> None:
        self.shapes()
        if not self.layers or not self.layers[-1].weighted:
            raise DimensionError("the last layer must be a weighted output layer")
        if self.layers[-1].lif is not None:
            raise DimensionError("the output layer accumulates potential and must not have LIF params")
        if not self.is_ann:
            for i, l in enumerate(self.layers[:-1]):
                if l.weighted and l.lif is None:
                    raise DimensionError(f"layer {i}: hidden weighted layer without LIF params")


@dataclass
class SimulationResult:
    """Per-layer activity of one (batched) simulation.

    ``records[i]`` is the output activity of layer ``i`` as ``[B, T, *shape]``
    (binary for spiking layers).  ``layer_inputs[i]`` is what layer ``i``
    consumed at every step, ``delta_t[i]`` the steps since the last post-spike
    (for spiking layers), ``winners[i]`` the max-pool winner indices.
    """

    output_potentials: np.ndarray
    records: list
    layer_inputs: list
    delta_t: list
    winners: list
    masks: dict
    states: list
    T: int


def _layer_current(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    if layer.kind == "conv2d":
        return conv2d_forward(x, layer.weight, layer.stride, layer.padding, layer.bias)
    return fc_forward(x.reshape(x.shape[0], -1), layer.weight, layer.bias)


def simulate_batch(net: NetworkSpec, inputs: np.ndarray, masks: dict | None = None,
                   record: bool = True) -> SimulationResult:
    """Run ``inputs`` of shape ``[B, T, *input_shape]`` through ``net``.

    ``masks`` maps dropout-layer index to a keep-mask of the layer's shape,
    or ``[B, *shape]`` for per-sample masks.  Without a mask a dropout layer
    is the identity.
    """
    net.validate()
    inputs = np.asarray(inputs)
    if inputs.shape[2:] != net.input_shape:
        raise DimensionError(f"input grid {inputs.shape[2:]} != network input {net.input_shape}")
    B, T = inputs.shape[:2]
    shapes = net.shapes()
    masks = dict(masks or {})
    dtype = np.result_type(inputs.dtype if inputs.dtype.kind == "f" else np.float32,
                           *[l.weight.dtype for l in net.layers if l.weight is not None])
    n = len(net.layers)
    states: list = [None] * n
    records: list = [None] * n
    layer_inputs: list = [None] * n
    delta_t: list = [None] * n
    winners: list = [None] * n
    in_shapes = [net.input_shape] + shapes[:-1]
    for i, (l, shp) in enumerate(zip(net.layers, shapes)):
        if l.weighted and i < n - 1:
            states[i] = LifState.zeros((B, *shp), v0=l.lif.v_reset, dtype=dtype)
        elif l.kind == "spike_maxpool":
            states[i] = np.zeros((B, *in_shapes[i]), dtype=dtype)
        if record:
            records[i] = np.zeros((B, T, *shp), dtype=dtype)
            if l.weighted:
                layer_inputs[i] = np.zeros((B, T, *in_shapes[i]), dtype=dtype)
                if i < n - 1:
                    delta_t[i] = np.zeros((B, T, *shp), dtype=np.int64)
            if l.kind == "spike_maxpool":
                winners[i] = np.zeros((B, T, *shp), dtype=np.int64)
        if l.kind == "dropout" and i in masks:
            m = np.asarray(masks[i], dtype=dtype)
            if m.shape not in (shp, (B, *shp)):
                raise DimensionError(f"dropout mask for layer {i} has shape {m.shape}, layer is {shp}")
            masks[i] = m
    u = np.zeros((B, *shapes[-1]), dtype=dtype)

    for t in range(T):
        x = inputs[:, t].astype(dtype, copy=False)
        for i, l in enumerate(net.layers):
            if l.weighted:
                if record:
                    layer_inputs[i][:, t] = x
                cur = _layer_current(l, x)
                if i == n - 1:
                    u = u + cur
                    x = cur
                else:
                    st = states[i]
                    x, st.v, st.last_spike = _lif_update(st.v, st.last_spike, cur, l.lif, t,
                                                         inhibit=l.inhibition and l.kind == "conv2d")
                    st.t = t + 1
                    if record:
                        delta_t[i][:, t] = np.where(st.last_spike >= 0, t - st.last_spike, t)
            elif l.kind == "avgpool":
                x = avgpool2d(x, l.window)
            elif l.kind == "spike_maxpool":
                x, states[i], w = spike_maxpool(x, states[i], l.window)
                if record:
                    winners[i][:, t] = w
            elif l.kind == "dropout":
                if i in masks:
                    x = x * masks[i]
            if record:
                records[i][:, t] = x
    return SimulationResult(u, records, layer_inputs, delta_t, winners, masks, states, T)


def forward_simulate(net: NetworkSpec, input_train, T: int | None = None, masks: dict | None = None):
    """Simulate one sample.  ``input_train`` is ``[T, *input_shape]``: binary
    spikes, or constant analog currents repeated over T steps.

    Returns ``(records, output_potentials, states)`` with the batch axis
    stripped from every record.
    """
    x = np.asarray(input_train)
    if T is not None and x.shape[0] != T:
        raise DimensionError(f"input has {x.shape[0]} steps, expected T={T}")
    res = simulate_batch(net, x[None], masks=masks)
    records = [r[0] for r in res.records]
    return records, res.output_potentials[0], res.states
