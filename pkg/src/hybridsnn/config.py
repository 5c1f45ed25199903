"""Experiment configuration: dataclass sections, JSON schema, network builder."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import jsonschema
import numpy as np

from .coding import EncoderParams
from .spiking import LayerSpec, LifParams, NetworkSpec
from .stdb import OptimizerParams, SurrogateParams
from .stdp import StdpParams


@dataclass
class DataConfig:
    n_per_class: int = 30
    size: int = 12
    noise_sigma: float = 0.1


@dataclass
class EncoderConfig:
    max_rate: float = 1.0
    timesteps: int = 100

    def params(self) -> EncoderParams:
        return EncoderParams(self.max_rate, self.timesteps)


@dataclass
class LifConfig:
    r_resistance: float = 1.0
    tau_m: float = 10.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    dt: float = 1.0

    def params(self, **override) -> LifParams:
        d = asdict(self)
        d.update(override)
        return LifParams(**d)


@dataclass
class StdpConfig:
    a_ltp: float = 0.004
    a_ltd: float = 0.003
    w_lb: float = 0.0
    w_ub: float = 1.0
    epochs: int = 5
    batch_size: int = 10
    threshold_scale: float = 0.5
    init_mean: float = 0.8
    init_std: float = 0.05

    def params(self) -> StdpParams:
        return StdpParams(self.a_ltp, self.a_ltd, self.w_lb, self.w_ub)


@dataclass
class StdbConfig:
    alpha: float = 0.3
    beta: float = 0.01
    learning_rate: float = 0.001
    momentum: float = 0.95
    weight_decay: float = 0.0005
    batch_size: int = 32
    epochs: int = 50
    loss: str = "ce"
    gamma: float = 2.0
    target_rate: float = 0.1
    target_accuracy: float | None = None

    def surrogate(self) -> SurrogateParams:
        return SurrogateParams(self.alpha, self.beta)

    def optimizer(self) -> OptimizerParams:
        return OptimizerParams(self.learning_rate, self.momentum, self.weight_decay, self.batch_size)


@dataclass
class ConversionConfig:
    mode: str = "channel"
    timesteps: int = 350
    percentile: float = 100.0
    ann_epochs: int = 30
    ann_learning_rate: float = 0.05


@dataclass
class UncertaintyConfig:
    dropout_rate: float = 0.2
    n_samples: int = 20


def default_layers() -> list:
    return [
        {"kind": "conv2d", "out": 4, "kernel": 3, "learning_tag": "stdp", "lif": {"v_threshold": 4.0}},
        {"kind": "spike_maxpool", "window": 2},
        {"kind": "fc", "out": 32, "learning_tag": "backprop"},
        {"kind": "dropout", "rate": 0.1},
        {"kind": "fc", "out": 16, "learning_tag": "backprop"},
        {"kind": "fc", "out": 3, "learning_tag": "backprop", "init_gain": 0.1},
    ]


@dataclass
class NetworkConfig:
    input_shape: list = field(default_factory=lambda: [1, 12, 12])
    layers: list = field(default_factory=default_layers)


@dataclass
class ExperimentConfig:
    seed: int = 42
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lif: LifConfig = field(default_factory=LifConfig)
    stdp: StdpConfig = field(default_factory=StdpConfig)
    stdb: StdbConfig = field(default_factory=StdbConfig)
    conversion: ConversionConfig = field(default_factory=ConversionConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def to_dict(self) -> dict:
        return asdict(self)


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}
_PROB = {"type": "number", "minimum": 0, "maximum": 1}


def _obj(props: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props}


_LIF_PROPS = {"r_resistance": _POS, "tau_m": {"anyOf": [_POS, {"const": "inf"}]},
              "v_threshold": _NUM, "v_reset": _NUM, "dt": _POS}

_LAYER = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["conv2d", "fc", "avgpool", "spike_maxpool", "dropout"]},
        "out": _POS_INT,
        "kernel": _POS_INT,
        "stride": _POS_INT,
        "padding": {"type": "integer", "minimum": 0},
        "window": _POS_INT,
        "rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "learning_tag": {"enum": ["stdp", "backprop", "frozen"]},
        "lif": _obj(_LIF_PROPS),
        "init_gain": _POS,
    },
}

SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "data": _obj({"n_per_class": _POS_INT, "size": {"type": "integer", "minimum": 8},
                  "noise_sigma": {"type": "number", "minimum": 0}}),
    "encoder": _obj({"max_rate": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                     "timesteps": _POS_INT}),
    "lif": _obj(_LIF_PROPS),
    "stdp": _obj({"a_ltp": _POS, "a_ltd": _POS, "w_lb": _NUM, "w_ub": _NUM, "epochs": _POS_INT,
                  "batch_size": _POS_INT, "threshold_scale": {"type": "number", "exclusiveMinimum": 0,
                                                              "maximum": 1},
                  "init_mean": _NUM, "init_std": {"type": "number", "minimum": 0}}),
    "stdb": _obj({"alpha": _POS, "beta": {"type": "number", "minimum": 0}, "learning_rate": _POS,
                  "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                  "weight_decay": {"type": "number", "minimum": 0}, "batch_size": _POS_INT,
                  "epochs": _POS_INT, "loss": {"enum": ["ce", "focal"]},
                  "gamma": {"type": "number", "minimum": 0},
                  "target_rate": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                  "target_accuracy": {"anyOf": [_PROB, {"type": "null"}]}}),
    "conversion": _obj({"mode": {"enum": ["channel", "layer"]}, "timesteps": _POS_INT,
                        "percentile": {"type": "number", "exclusiveMinimum": 0, "maximum": 100},
                        "ann_epochs": _POS_INT, "ann_learning_rate": _POS}),
    "uncertainty": _obj({"dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                         "n_samples": _POS_INT}),
    "network": _obj({"input_shape": {"type": "array", "items": _POS_INT, "minItems": 1, "maxItems": 3},
                     "layers": {"type": "array", "items": _LAYER, "minItems": 1}}),
})


class ConfigError(ValueError):
    pass


def validate_config(doc: dict) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from None


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Validate, then overlay ``doc`` on the defaults section by section."""
    validate_config(doc)
    cfg = ExperimentConfig()
    for f in fields(cfg):
        if f.name not in doc:
            continue
        val = doc[f.name]
        if isinstance(val, dict):
            section = getattr(cfg, f.name)
            for k, v in val.items():
                setattr(section, k, v)
        else:
            setattr(cfg, f.name, val)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg}, line {e.lineno})") from None
    return config_from_dict(doc)


def build_network(cfg: ExperimentConfig, rng: np.random.Generator, ann: bool = False) -> NetworkSpec:
    """Instantiate the configured topology with fresh weights.

    STDP-tagged conv kernels start near ``stdp.init_mean``; all other weights
    are zero-mean Gaussians with std ``init_gain / sqrt(fan_in)``.  With
    ``ann=True`` no layer gets LIF parameters.
    """
    layers_cfg = cfg.network.layers
    shape = tuple(cfg.network.input_shape)
    layers = []
    n = len(layers_cfg)
    for i, d in enumerate(layers_cfg):
        kind = d["kind"]
        tag = d.get("learning_tag", "frozen")
        lif = None
        W = b = None
        if kind in ("conv2d", "fc"):
            if "out" not in d:
                raise ConfigError(f"network/layers/{i}: weighted layer needs 'out'")
            if kind == "conv2d":
                k = d.get("kernel", 3)
                if len(shape) != 3:
                    raise ConfigError(f"network/layers/{i}: conv2d needs a [C, H, W] input")
                wshape = (d["out"], shape[0], k, k)
                fan_in = shape[0] * k * k
            else:
                wshape = (d["out"], int(np.prod(shape)))
                fan_in = wshape[1]
            if kind == "conv2d" and tag == "stdp":
                W = np.clip(rng.normal(cfg.stdp.init_mean, cfg.stdp.init_std, wshape),
                            cfg.stdp.w_lb, cfg.stdp.w_ub)
            else:
                W = rng.normal(0.0, d.get("init_gain", 1.0) / math.sqrt(fan_in), wshape)
                b = np.zeros(d["out"])
            W = W.astype(np.float32)
            b = None if b is None else b.astype(np.float32)
            if i < n - 1 and not ann:
                over = dict(d.get("lif", {}))
                if over.get("tau_m") == "inf":
                    over["tau_m"] = math.inf
                lif = cfg.lif.params(**over)
        layer = LayerSpec(kind, W, b, stride=d.get("stride", 1), padding=d.get("padding", 0),
                          window=d.get("window", 2), rate=d.get("rate", 0.0), lif=lif, learning_tag=tag)
        layers.append(layer)
        shape = NetworkSpec(shape, [layer]).shapes()[0]
    net = NetworkSpec(tuple(cfg.network.input_shape), layers)
    net.validate()
    return net
