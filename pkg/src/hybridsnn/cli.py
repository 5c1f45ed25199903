"""Command-line driver.

Exit codes: 0 success, 2 usage or parameter error, 3 data/format error,
4 numeric failure.  Machine-readable JSON goes to ``--out`` (for commands
that also write a checkpoint or dataset, to ``<out>.json`` or
``<out>/report.json``); a short human summary goes to standard output.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as ex
from .checkpoint import load_network, save_network
from .coding import poisson_encode_batch
from .config import ConfigError, ExperimentConfig, load_config
from .data import FormatError, _atomic_write
from .energy import (
    EnergyConstants,
    count_ac_flops,
    count_mac_flops,
    energy_report,
    reference_report,
)
from .evaluation import (
    aggregate_mcmue,
    average_precision,
    average_recall_at_k,
    split_by_correctness,
)
from .numerics import DimensionError, NumericError, make_rng
from .records import read_detection_records, read_ground_truths
from .spiking import simulate_batch
from .tailindex import (
    OuProcessSpec,
    estimate_tail_index,
    gaussian_log_density_gradient,
    sample_alpha_stable,
    simulate_ou_sampling,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("hybridsnn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else str(f)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def write_json(path, obj) -> None:
    text = json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"
    _atomic_write(path, text.encode("utf-8"))


def _global_flags(p, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=d, help="override the config seed")
    p.add_argument("--out", metavar="PATH", default=d, help="output path")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="no human summary")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hybridsnn", description="Hybrid STDP/STDB spiking networks: training, "
                "conversion, evaluation, tail-index and energy analysis.")
    _global_flags(p, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    s = add("gen-data", "write the synthetic oriented-bar set as IDX files into --out")
    s.add_argument("--n-per-class", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--noise", type=float)

    s = add("train-stdp", "layer-wise STDP on the stdp-tagged layers; checkpoint to --out")
    s.add_argument("--data", metavar="DIR", help="IDX dataset directory (default: generate from config)")
    s.add_argument("--epochs", type=int)

    s = add("train-stdb", "STDB training; checkpoint to --out")
    s.add_argument("--data", metavar="DIR")
    s.add_argument("--init", metavar="CKPT", help="start from this checkpoint (e.g. after train-stdp)")
    s.add_argument("--epochs", type=int)

    s = add("convert", "convert a ReLU network to an SNN; checkpoint to --out")
    s.add_argument("--data", metavar="DIR")
    s.add_argument("--ann", metavar="CKPT", help="source ANN (default: train the configured topology)")
    s.add_argument("--mode", choices=["channel", "layer"])
    s.add_argument("--timesteps", type=int)

    s = add("eval-class", "classification accuracy of a checkpoint")
    s.add_argument("--model", metavar="CKPT", required=True)
    s.add_argument("--data", metavar="DIR")

    s = add("eval-det", "detection metrics from JSON-lines records")
    s.add_argument("--dets", metavar="PATH", required=True)
    s.add_argument("--gts", metavar="PATH", required=True)
    s.add_argument("--metric", default="map", help="map or ar@K")

    s = add("uncertainty", "MC-dropout uncertainty (model mode) or CMUE of detection records")
    s.add_argument("--model", metavar="CKPT")
    s.add_argument("--data", metavar="DIR")
    s.add_argument("--dets", metavar="PATH")
    s.add_argument("--gts", metavar="PATH")
    s.add_argument("--n-samples", type=int)
    s.add_argument("--rate", type=float)

    s = add("tail-index", "tail index of SGD/STDP noise, synthetic SaS samples or OU increments")
    s.add_argument("--mode", choices=["sgd", "stdp", "synthetic", "ou"], required=True)
    s.add_argument("--alpha", type=float, default=2.0)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--n", type=int, default=40000)
    s.add_argument("--batch-size", type=int, default=10)
    s.add_argument("--passes", type=int, default=10)
    s.add_argument("--data", metavar="DIR")
    s.add_argument("--model", metavar="CKPT", help="weight snapshot (default: configured init)")
    s.add_argument("--layer", type=int, help="harvest only this layer's weights")
    s.add_argument("--steps", type=int, default=100_000)
    s.add_argument("--dim", type=int, default=64)

    s = add("energy", "MAC/AC energy estimate")
    s.add_argument("--model", metavar="CKPT", help="SNN checkpoint (default: the published op counts)")
    s.add_argument("--timesteps", type=int)
    s.add_argument("--integer", action="store_true", help="32-bit integer operation energies")
    s.add_argument("--measured", action="store_true", help="count ACs from simulated spikes on --data")
    s.add_argument("--data", metavar="DIR")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg.seed = args.seed
    return cfg


def _data(cfg, args):
    if getattr(args, "data", None):
        return ex.load_dataset(args.data)
    return ex.synthetic_dataset(cfg)


def _need_out(args, what):
    if not args.out:
        raise UsageError(f"{args.command} needs --out for the {what}")
    return Path(args.out)


def _report_path(out: Path) -> Path:
    return out.with_name(out.name + ".json")


def cmd_gen_data(cfg, args):
    out = _need_out(args, "dataset directory")
    if args.n_per_class is not None:
        cfg.data.n_per_class = args.n_per_class
    if args.size is not None:
        cfg.data.size = args.size
    if args.noise is not None:
        cfg.data.noise_sigma = args.noise
    if cfg.data.n_per_class < 1 or cfg.data.size < 8 or cfg.data.noise_sigma < 0:
        raise UsageError("need n-per-class >= 1, size >= 8, noise >= 0")
    x, y = ex.synthetic_dataset(cfg)
    ex.save_dataset(out, x[:, 0], y)
    rep = {"n": len(y), "size": cfg.data.size, "noise_sigma": cfg.data.noise_sigma, "seed": cfg.seed,
           "class_counts": np.bincount(y).tolist()}
    write_json(out / "report.json", rep)
    return rep, f"wrote {len(y)} images ({cfg.data.size}x{cfg.data.size}) to {out}"


def cmd_train_stdp(cfg, args):
    out = _need_out(args, "checkpoint")
    if args.epochs is not None:
        cfg.stdp.epochs = args.epochs
    x, _ = _data(cfg, args)
    net, rep = ex.run_stdp(cfg, x)
    save_network(out, net, {"stage": "stdp", "seed": cfg.seed, "config": cfg.to_dict()})
    write_json(_report_path(out), rep)
    last = rep["convergence"][-1]["score"] if rep["convergence"] else float("nan")
    return rep, f"STDP done; final convergence score {last:.4f}; checkpoint {out}"


def cmd_train_stdb(cfg, args):
    out = _need_out(args, "checkpoint")
    if args.epochs is not None:
        cfg.stdb.epochs = args.epochs
    x, y = _data(cfg, args)
    net = load_network(args.init)[0] if args.init else None
    net, rep = ex.run_stdb(cfg, x, y, net)
    save_network(out, net, {"stage": "stdb", "seed": cfg.seed, "config": cfg.to_dict()})
    write_json(_report_path(out), rep)
    return rep, (f"STDB done after {rep['epochs_run']} epochs; train accuracy "
                 f"{rep['final_train_accuracy']:.3f}; checkpoint {out}")


def cmd_convert(cfg, args):
    out = _need_out(args, "checkpoint")
    x, y = _data(cfg, args)
    ann = load_network(args.ann)[0] if args.ann else None
    if ann is not None and not ann.is_ann:
        raise FormatError(f"{args.ann}: not an ANN checkpoint")
    _, snn, rep = ex.run_conversion(cfg, x, y, ann, args.mode, args.timesteps)
    save_network(out, snn, {"stage": "converted", "seed": cfg.seed, "mode": rep["mode"], "T": rep["T"]})
    write_json(_report_path(out), rep)
    return rep, f"converted ({rep['mode']}, T={rep['T']}): agreement {rep['agreement']:.3f}"


def cmd_eval_class(cfg, args):
    net, _ = load_network(args.model)
    x, y = _data(cfg, args)
    rep = ex.evaluate_classification(cfg, net, x, y)
    if args.out:
        write_json(args.out, rep)
    return rep, f"accuracy {rep['accuracy']:.4f} on {rep['n']} samples"


def cmd_eval_det(cfg, args):
    dets = read_detection_records(args.dets)
    gts = read_ground_truths(args.gts)
    metric = args.metric.lower()
    if metric == "map":
        ap = average_precision(dets, gts)
        if not ap:
            raise FormatError(f"{args.gts}: no ground truth")
        rep = {"metric": "map", "map": float(np.mean(list(ap.values()))), "ap": ap}
        msg = f"mAP@0.5 {rep['map']:.4f}"
    elif metric.startswith("ar@"):
        try:
            k = int(metric[3:])
        except ValueError:
            raise UsageError(f"bad metric {args.metric!r}") from None
        if k < 1:
            raise UsageError("ar@K needs K >= 1")
        rep = {"metric": metric, "ar": average_recall_at_k(dets, gts, k), "k": k}
        msg = f"AR@{k} {rep['ar']:.4f}"
    else:
        raise UsageError(f"unknown metric {args.metric!r} (map or ar@K)")
    if args.out:
        write_json(args.out, rep)
    return rep, msg


def cmd_uncertainty(cfg, args):
    if args.dets:
        if not args.gts:
            raise UsageError("--dets needs --gts")
        per = split_by_correctness(read_detection_records(args.dets), read_ground_truths(args.gts))
        rep = aggregate_mcmue(per).to_dict()
    elif args.model:
        net, _ = load_network(args.model)
        x, y = _data(cfg, args)
        rep = ex.run_uncertainty(cfg, net, x, y, args.n_samples, args.rate)
    else:
        raise UsageError("uncertainty needs --model or --dets/--gts")
    if args.out:
        write_json(args.out, rep)
    m = rep.get("mcmue")
    return rep, "mCMUE " + ("n/a" if m is None else f"{m:.4f}")


def cmd_tail_index(cfg, args):
    rng = make_rng(cfg.seed, ex.S_TAIL)
    if args.passes < 1 or args.batch_size < 1:
        raise UsageError("--passes and --batch-size must be >= 1")
    if args.mode == "synthetic":
        if not 0 < args.alpha <= 2:
            raise UsageError("--alpha must lie in (0, 2]")
        if args.n < 4 or args.sigma <= 0:
            raise UsageError("--n must be >= 4 and --sigma > 0")
        est = estimate_tail_index(sample_alpha_stable(args.alpha, args.sigma, args.n, rng))
        extra = {"alpha_true": args.alpha}
    elif args.mode == "ou":
        if args.steps < 10 or args.dim < 1:
            raise UsageError("--steps must be >= 10 and --dim >= 1")
        spec = OuProcessSpec(gaussian_log_density_gradient, 0.1, 1.0, 0.01, args.steps)
        path = simulate_ou_sampling(spec, np.zeros(args.dim), rng)
        est = estimate_tail_index(np.diff(path, axis=0))
        burn = args.steps // 10
        extra = {"stationary_variance": float(path[burn:].var()), "temperature": 1.0}
    else:
        x, y = _data(cfg, args)
        net = load_network(args.model)[0] if args.model else None
        if args.mode == "sgd":
            if net is not None and not net.is_ann:
                raise FormatError("sgd mode needs an ANN snapshot")
            U = ex.sgd_noise(cfg, x, y, args.batch_size, args.passes, args.layer, net)
        else:
            if net is not None and net.is_ann:
                raise FormatError("stdp mode needs a spiking snapshot")
            U = ex.stdp_noise(cfg, x, args.batch_size, args.passes, args.layer, net)
        est = estimate_tail_index(U)
        extra = {"batch_size": args.batch_size, "passes": args.passes, "layer": args.layer}
    rep = est.report(args.mode)
    rep.update(extra)
    if args.out:
        write_json(args.out, rep)
    return rep, f"{args.mode}: alpha_hat {est.alpha_hat:.4f} (K={est.K}, K1={est.K1}, K2={est.K2})"


def cmd_energy(cfg, args):
    consts = EnergyConstants.integer() if args.integer else EnergyConstants()
    if not args.model:
        rep = reference_report()
        if args.integer:
            rep.update(energy_report(rep["mac"], rep["ac"], rep["T"], consts, "reference-int"))
        msg = f"reference counts: ratio {rep['ratio']:.2f} (tabulated {rep['table_ratio']})"
    else:
        net, _ = load_network(args.model)
        T = args.timesteps or cfg.encoder.timesteps
        if T < 1:
            raise UsageError("--timesteps must be >= 1")
        mac = count_mac_flops(net).total
        if args.measured:
            x, _ = _data(cfg, args)
            enc = cfg.encoder.params()
            enc = type(enc)(enc.max_rate, T)
            res = simulate_batch(net, poisson_encode_batch(x, enc, make_rng(cfg.seed, ex.S_EVAL)))
            ac = count_ac_flops(net, spike_record=res).total
            # energy_report multiplies by T; a measured count already spans the window
            rep = energy_report(mac, ac / T, T, consts, "measured")
            rep["ac"] = ac
        else:
            ac = count_ac_flops(net).total
            rep = energy_report(mac, ac, T, consts, "structural")
        msg = f"E_ANN {rep['e_ann_j']:.4g} J, E_SNN {rep['e_snn_j']:.4g} J, ratio {rep['ratio']:.3f}"
    if args.out:
        write_json(args.out, rep)
    return rep, msg


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-stdp": cmd_train_stdp,
    "train-stdb": cmd_train_stdb,
    "convert": cmd_convert,
    "eval-class": cmd_eval_class,
    "eval-det": cmd_eval_det,
    "uncertainty": cmd_uncertainty,
    "tail-index": cmd_tail_index,
    "energy": cmd_energy,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = _config(args)
        rep, msg = COMMANDS[args.command](cfg, args)
    except UsageError as e:
        print(f"hybridsnn {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ConfigError, DimensionError, FileNotFoundError, IsADirectoryError) as e:
        print(f"hybridsnn {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError, OverflowError) as e:
        print(f"hybridsnn {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"hybridsnn {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    if not args.quiet:
        print(f"{msg}  [{time.perf_counter() - t0:.1f}s]")
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
