"""Plain FL with each server optimizer on the same synthetic clients.

Example:
    python3 scripts/server_comparison.py --seed 0 --epochs 200
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from plfl.data import build_dataset, synth_clients
from plfl.federation import make_clients, run_fl
from plfl.metrics import evaluate, model_predictor
from plfl.model import ModelConfig
from plfl.optim import SERVER_ALGOS, HyperParams


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--clients", type=int, default=4)
    ap.add_argument("--spread", type=float, default=100.0)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    config = ModelConfig()
    datasets = [build_dataset(r, config.lookback)
                for r in synth_clients(args.clients, scale_spread=args.spread, seed=args.seed)]
    results = {}
    for algo in SERVER_ALGOS:
        theta, _ = run_fl(make_clients(datasets, args.seed), HyperParams(server_epochs=args.epochs),
                          algo, args.seed, config)
        report = evaluate(model_predictor(config, theta), datasets, "test", algo, "FL")
        results[algo] = {"mean_mae": report.mean_mae, "mean_mase": report.mean_mase}
        print(f"{algo:<8} MAE {report.mean_mae:10.4f}  MASE {report.mean_mase:.3f}", flush=True)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
