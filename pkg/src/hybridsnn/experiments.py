"""End-to-end runs built from the configuration: datasets, the STDP -> STDB
pipeline, conversion, MC-dropout uncertainty and tail-index comparisons.

Every stochastic step draws from its own stream of the experiment seed, so a
run is reproducible stage by stage.
"""

from __future__ import annotations

import copy
import logging
from pathlib import Path

import numpy as np

from .coding import poisson_encode_batch
from .config import ExperimentConfig, build_network
from .conversion import (
    ann_accuracy,
    ann_forward,
    ann_loss_and_grads,
    calibration_stats,
    convert_ann_to_snn,
    flatten_grads,
    train_ann,
)
from .data import FormatError, generate_synthetic_patterns, read_idx_pair, write_idx
from .evaluation import aggregate_mcmue, mc_dropout_infer, mc_summary
from .numerics import make_rng
from .spiking import NetworkSpec, simulate_batch
from .stdb import calibrate_firing_rates, predict, train_stdb
from .stdp import LayerwiseSchedule, stdp_convergence_score, train_stdp_layerwise
from .tailindex import collect_sgd_gradient_noise, collect_stdp_update_noise, estimate_tail_index

log = logging.getLogger(__name__)

# one RNG stream per stage
S_INIT, S_STDP, S_CALIB, S_STDB, S_EVAL, S_TAIL, S_MC, S_CONV = range(1, 9)

IMAGES_FILE = "images-idx3-ubyte"
LABELS_FILE = "labels-idx1-ubyte"


def save_dataset(directory, images, labels) -> None:
    d = Path(directory)
    write_idx(d / IMAGES_FILE, images)
    write_idx(d / LABELS_FILE, labels)


def load_dataset(directory):
    """IDX pair from ``directory`` as ``([N, 1, H, W] float32, [N] int64)``."""
    d = Path(directory)
    x, y = read_idx_pair(d / IMAGES_FILE, d / LABELS_FILE)
    return x[:, None], y


def synthetic_dataset(cfg: ExperimentConfig):
    x, y = generate_synthetic_patterns(cfg.data.n_per_class, cfg.data.size, cfg.data.noise_sigma, cfg.seed)
    # round through the 8-bit IDX representation so in-memory and on-disk runs agree
    x = np.rint(x * 255.0).astype(np.float32) / 255.0
    return x[:, None], y


def _check_input(net: NetworkSpec, x):
    if tuple(x.shape[1:]) != net.input_shape:
        raise FormatError(f"data shape {tuple(x.shape[1:])} does not match network input {net.input_shape}")


def run_stdp(cfg: ExperimentConfig, x, net: NetworkSpec | None = None):
    """Layer-wise STDP on the stdp-tagged layers.  Returns ``(net, report)``."""
    net = net if net is not None else build_network(cfg, make_rng(cfg.seed, S_INIT))
    _check_input(net, x)
    params = cfg.stdp.params()
    scores = []

    def on_epoch(stage, epoch, n):
        scores.append({"layer": stage.layer, "epoch": epoch,
                       "score": stdp_convergence_score(n.layers[stage.layer].weight, params)})

    sched = LayerwiseSchedule.for_network(net, len(x), cfg.stdp.threshold_scale)
    net = train_stdp_layerwise(net, x, sched, params, cfg.encoder.params(), make_rng(cfg.seed, S_STDP),
                               cfg.stdp.batch_size, cfg.stdp.epochs, on_epoch)
    return net, {"convergence": scores}


def run_stdb(cfg: ExperimentConfig, x, y, net: NetworkSpec | None = None):
    """Rate-calibrated init of the backprop layers, then STDB training."""
    net = net if net is not None else build_network(cfg, make_rng(cfg.seed, S_INIT))
    _check_input(net, x)
    enc = cfg.encoder.params()
    net = calibrate_firing_rates(net, x, enc, make_rng(cfg.seed, S_CALIB), cfg.stdb.target_rate)
    net, hist = train_stdb(net, x, y, cfg.stdb.optimizer(), cfg.stdb.surrogate(), enc, cfg.stdb.epochs,
                           make_rng(cfg.seed, S_STDB), cfg.stdb.loss, cfg.stdb.gamma,
                           cfg.stdb.target_accuracy)
    return net, {"history": hist, "final_train_accuracy": hist[-1]["accuracy"], "epochs_run": len(hist)}


def evaluate_classification(cfg: ExperimentConfig, net: NetworkSpec, x, y) -> dict:
    _check_input(net, x)
    if net.is_ann:
        scores, _ = ann_forward(net, x)
    else:
        scores = predict(net, x, cfg.encoder.params(), make_rng(cfg.seed, S_EVAL))
    pred = np.argmax(scores, axis=1)
    n_cls = scores.shape[1]
    conf = np.zeros((n_cls, n_cls), dtype=int)
    np.add.at(conf, (np.asarray(y), pred), 1)
    return {"accuracy": float(np.mean(pred == y)), "n": int(len(y)), "confusion": conf.tolist(),
            "kind": "ann" if net.is_ann else "snn"}


def run_pipeline(cfg: ExperimentConfig) -> dict:
    x, y = synthetic_dataset(cfg)
    net, rep_stdp = run_stdp(cfg, x)
    net, rep_stdb = run_stdb(cfg, x, y, net)
    return {"stdp": rep_stdp, "stdb": rep_stdb, "eval": evaluate_classification(cfg, net, x, y), "net": net}


def standard_cnn(cfg: ExperimentConfig, seed: int | None = None) -> NetworkSpec:
    """The configured topology as a ReLU network with every layer trainable."""
    c = copy.deepcopy(cfg)
    for d in c.network.layers:
        if "learning_tag" in d:
            d["learning_tag"] = "backprop"
    return build_network(c, make_rng(cfg.seed if seed is None else seed, S_INIT), ann=True)


def sgd_noise(cfg: ExperimentConfig, x, y, batch_size: int, passes: int, layer: int | None = None,
              ann: NetworkSpec | None = None):
    """Gradient noise of the standard CNN at its initial weights.  With
    ``layer`` set only that layer's weight gradient is harvested."""
    ann = ann if ann is not None else standard_cnn(cfg)

    def grad_fn(idx):
        g = ann_loss_and_grads(ann, x[idx], y[idx])[1]
        return flatten_grads(g) if layer is None else g[layer][0].ravel()

    return collect_sgd_gradient_noise(grad_fn, len(x), batch_size, passes, make_rng(cfg.seed, S_TAIL))


def stdp_noise(cfg: ExperimentConfig, x, batch_size: int, passes: int, layer: int | None = None,
               net: NetworkSpec | None = None):
    net = net if net is not None else build_network(cfg, make_rng(cfg.seed, S_INIT))
    if layer is None:
        layer = next(i for i, l in enumerate(net.layers) if l.learning_tag == "stdp")
    return collect_stdp_update_noise(net, layer, x, batch_size, passes, make_rng(cfg.seed, S_TAIL),
                                     cfg.stdp.params(), cfg.encoder.params())


def tail_index_comparison(cfg: ExperimentConfig, x, y, batch_size: int = 10, passes: int = 10) -> dict:
    """Like-for-like comparison on the first STDP layer: SGD gradient noise
    of the standard CNN and STDP update noise of the spiking net, both at
    initialization, with the same batches size and pass count."""
    net = build_network(cfg, make_rng(cfg.seed, S_INIT))
    layer = next(i for i, l in enumerate(net.layers) if l.learning_tag == "stdp")
    sgd = estimate_tail_index(sgd_noise(cfg, x, y, batch_size, passes, layer))
    stdp = estimate_tail_index(stdp_noise(cfg, x, batch_size, passes, layer, net))
    return {"layer": layer, "batch_size": batch_size, "passes": passes,
            "sgd": sgd.report("sgd"), "stdp": stdp.report("stdp")}


def run_conversion(cfg: ExperimentConfig, x, y, ann: NetworkSpec | None = None, mode: str | None = None,
                   T: int | None = None):
    """Train (if needed) and convert a ReLU network; report label agreement
    between the ANN and the converted SNN on ``x``."""
    mode = mode or cfg.conversion.mode
    T = T or cfg.conversion.timesteps
    if ann is None:
        ann = standard_cnn(cfg)
        ann, _ = train_ann(ann, x, y, lr=cfg.conversion.ann_learning_rate, epochs=cfg.conversion.ann_epochs,
                           batch_size=cfg.stdb.batch_size, rng=make_rng(cfg.seed, S_CONV))
    _check_input(ann, x)
    stats = calibration_stats(ann, x, cfg.conversion.percentile)
    snn = convert_ann_to_snn(ann, stats, mode, T)
    ann_pred = np.argmax(ann_forward(ann, x)[0], axis=1)
    enc = cfg.encoder.params()
    enc = type(enc)(enc.max_rate, T)
    out = []
    rng = make_rng(cfg.seed, S_EVAL)
    for s in range(0, len(x), 64):
        out.append(simulate_batch(snn, poisson_encode_batch(x[s:s + 64], enc, rng), record=False)
                   .output_potentials)
    snn_pred = np.argmax(np.concatenate(out), axis=1)
    rep = {"mode": mode, "T": T, "ann_accuracy": ann_accuracy(ann, x, y),
           "snn_accuracy": float(np.mean(snn_pred == y)), "agreement": float(np.mean(snn_pred == ann_pred)),
           "layer_max": {str(k): v for k, v in stats.layer_max.items()}}
    return ann, snn, rep


def run_uncertainty(cfg: ExperimentConfig, net: NetworkSpec, x, y, n_samples: int | None = None,
                    rate: float | None = None) -> dict:
    """MC-dropout entropy per sample; CMUE per true class from correct vs
    incorrect predictions."""
    n_samples = n_samples or cfg.uncertainty.n_samples
    rate = cfg.uncertainty.dropout_rate if rate is None else rate
    rng = make_rng(cfg.seed, S_MC)
    enc = cfg.encoder.params()
    per_class: dict = {}
    ent = []
    correct = 0
    for i in range(len(x)):
        train = poisson_encode_batch(x[i:i + 1], enc, rng)[0]
        summ = mc_summary(mc_dropout_infer(net, train, n_samples, rate, rng))
        ent.append(summ["entropy"])
        ok = summ["label"] == int(y[i])
        correct += ok
        cor, inc = per_class.setdefault(int(y[i]), ([], []))
        (cor if ok else inc).append(summ["entropy"])
    rep = {"n_samples": n_samples, "dropout_rate": rate, "accuracy": correct / len(x),
           "mean_entropy": float(np.mean(ent))}
    try:
        rep.update(aggregate_mcmue(per_class).to_dict())
    except ValueError as e:
        rep["mcmue"] = None
        rep["note"] = str(e)
    return rep
