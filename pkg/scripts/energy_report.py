"""Energy of the configured network (structural and measured AC counts)
next to the published op counts."""

import argparse

import numpy as np

from hybridsnn.cli import write_json
from hybridsnn.coding import poisson_encode_batch
from hybridsnn.config import ExperimentConfig, build_network
from hybridsnn.energy import count_ac_flops, count_mac_flops, energy_report, reference_report
from hybridsnn.experiments import S_EVAL, S_INIT, synthetic_dataset
from hybridsnn.numerics import make_rng
from hybridsnn.spiking import simulate_batch


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--out", default="energy_report.json")
    args = ap.parse_args()
    cfg = ExperimentConfig(seed=args.seed)
    net = build_network(cfg, make_rng(cfg.seed, S_INIT))
    x, _ = synthetic_dataset(cfg)
    T = cfg.encoder.timesteps
    mac = count_mac_flops(net).total
    structural = energy_report(mac, count_ac_flops(net).total, T, mode="structural")
    res = simulate_batch(net, poisson_encode_batch(x, cfg.encoder.params(), make_rng(cfg.seed, S_EVAL)))
    ac = count_ac_flops(net, spike_record=res).total
    measured = energy_report(mac, ac / T, T, mode="measured")
    ref = reference_report()
    for name, r in (("structural", structural), ("measured", measured), ("reference", ref)):
        print(f"{name:10s}  E_ANN {r['e_ann_j']:.4g} J  E_SNN {r['e_snn_j']:.4g} J  ratio {r['ratio']:.2f}")
    print(ref["note"])
    write_json(args.out, {"structural": structural, "measured": measured, "reference": ref,
                          "mean_input_rate": float(np.mean(res.layer_inputs[0]))})


if __name__ == "__main__":
    main()
