"""STDP pretraining, STDB training and evaluation on the synthetic bar set,
in memory.  Writes the combined report as JSON."""

import argparse
import logging

from hybridsnn.cli import write_json
from hybridsnn.config import ExperimentConfig, load_config
from hybridsnn.experiments import run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--out", default="pipeline_report.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg.seed = args.seed
    rep = run_pipeline(cfg)
    rep.pop("net")
    write_json(args.out, rep)
    print(f"train accuracy {rep['stdb']['final_train_accuracy']:.3f}, eval accuracy {rep['eval']['accuracy']:.3f}")


if __name__ == "__main__":
    main()
