"""Label agreement of converted SNNs against the source ReLU MLP over a
range of window lengths, for both normalization modes, plus the
small-activation-channel stress test."""

import argparse

import numpy as np

from hybridsnn.cli import write_json
from hybridsnn.coding import EncoderParams, poisson_encode_batch
from hybridsnn.conversion import ann_forward, calibration_stats, convert_ann_to_snn, small_channel_stress_test, train_ann
from hybridsnn.data import generate_separable_toy
from hybridsnn.spiking import LayerSpec, NetworkSpec, simulate_batch


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--timesteps", type=int, nargs="+", default=[10, 25, 50, 100, 200, 350])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="conversion_sweep.json")
    args = ap.parse_args()
    x, y = generate_separable_toy(400, 4, 0.15, args.seed)
    rng = np.random.default_rng(args.seed)
    ann = NetworkSpec((4,), [LayerSpec("fc", rng.normal(0, 0.5, (16, 4)), np.zeros(16)),
                             LayerSpec("fc", rng.normal(0, 0.25, (2, 16)), np.zeros(2))])
    ann, _ = train_ann(ann, x, y, lr=0.1, epochs=200, batch_size=32, rng=np.random.default_rng(args.seed + 1))
    ref = np.argmax(ann_forward(ann, x)[0], axis=1)
    stats = calibration_stats(ann, x)
    rows = []
    for T in args.timesteps:
        row = {"T": T}
        for mode in ("channel", "layer"):
            snn = convert_ann_to_snn(ann, stats, mode, T)
            tr = poisson_encode_batch(x[:200], EncoderParams(1.0, T), np.random.default_rng(args.seed + 2))
            pred = np.argmax(simulate_batch(snn, tr, record=False).output_potentials, axis=1)
            row[mode] = float(np.mean(pred == ref[:200]))
        rows.append(row)
        print(f"T={T:4d}  channel {row['channel']:.3f}  layer {row['layer']:.3f}")
    stress = small_channel_stress_test()
    print(f"stress test rate error: channel {stress['channel']:.3f}, layer {stress['layer']:.3f}")
    write_json(args.out, {"ann_accuracy": float(np.mean(ref == y)), "sweep": rows, "stress": stress})


if __name__ == "__main__":
    main()
