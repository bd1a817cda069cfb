"""Compare plain FL against personalization layers on heterogeneous synthetic clients.

Example:
    python3 scripts/heterogeneity.py --seeds 0 1 2 3 4 --epochs 200 --partitions FL P1 --out results/het.json
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from plfl.data import build_dataset, pooled_scaler, synth_clients
from plfl.federation import make_clients, run_fl, run_nofl, run_plfl
from plfl.metrics import evaluate, model_predictor
from plfl.model import LayerPartition, ModelConfig
from plfl.optim import HyperParams


def run_seed(seed, args, config, hp):
    raws = synth_clients(args.clients, scale_spread=args.spread, seed=seed, noise=args.noise)
    datasets = [build_dataset(r, config.lookback) for r in raws]
    row = {"seed": seed}
    for pid in args.partitions:
        start = time.perf_counter()
        if pid == "FL":
            theta, _ = run_fl(make_clients(datasets, seed), hp, args.server, seed, config)
            predictor = model_predictor(config, theta)
        elif pid == "NoFL":
            scaler = pooled_scaler(raws)
            datasets_pooled = [build_dataset(r, config.lookback, scaler) for r in raws]
            theta = run_nofl(datasets_pooled, hp, seed, config, epochs=args.nofl_epochs)
            report = evaluate(model_predictor(config, theta), datasets_pooled, "test")
            row[pid] = {"mean_mase": report.mean_mase, "mean_mae": report.mean_mae,
                        "clients": [c.mase for c in report.clients]}
            print(f"seed {seed} {pid}: MASE {report.mean_mase:.3f} ({time.perf_counter() - start:.0f}s)", flush=True)
            continue
        else:
            phi, psi, _ = run_plfl(make_clients(datasets, seed), hp, args.server, pid, seed, config)
            predictor = model_predictor(config, phi, psi, LayerPartition.from_id(pid))
        report = evaluate(predictor, datasets, "test")
        row[pid] = {"mean_mase": report.mean_mase, "mean_mae": report.mean_mae,
                    "clients": [c.mase for c in report.clients]}
        print(f"seed {seed} {pid}: MASE {report.mean_mase:.3f} ({time.perf_counter() - start:.0f}s)", flush=True)
    return row


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=200, help="server epochs")
    ap.add_argument("--nofl-epochs", type=int, default=800)
    ap.add_argument("--clients", type=int, default=4)
    ap.add_argument("--spread", type=float, default=100.0)
    ap.add_argument("--noise", type=float, default=0.15)
    ap.add_argument("--server", default="fedadam", choices=["fedavg", "fedavgm", "fedadam"])
    ap.add_argument("--partitions", nargs="+", default=["FL", "P1"],
                    choices=["FL", "P1", "P2", "P3", "NoFL"])
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    config, hp = ModelConfig(), HyperParams(server_epochs=args.epochs)
    rows = [run_seed(s, args, config, hp) for s in args.seeds]
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps({"args": {k: v for k, v in vars(args).items() if k != "out"},
                                        "runs": rows}, indent=2) + "\n")


if __name__ == "__main__":
    main()
