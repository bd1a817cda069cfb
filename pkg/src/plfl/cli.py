"""Command-line entry point: ``plfl [--config FILE] [--set section.key=value ...] <command>``.

Commands: ``generate``, ``analyze``, ``train``, ``evaluate``, ``bandwidth``.
Outputs go to ``run.output_dir``; when unset, a run-specific folder under
``$PLFL_OUTPUT_ROOT`` (default ``./runs``).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .data import (
    CorrelationError, DataError, build_dataset, correlation_report, load_directory,
    pooled_scaler, synth_clients, write_csv,
)
from .federation import (
    DivergenceError, bandwidth_report, make_clients, run_fl, run_nofl, run_plfl, write_history,
)
from .metrics import MetricError, client_forecast, evaluate, model_predictor, write_forecasts
from .model import PARTITION_IDS, LayerPartition, ParamSet, load_params, save_params

log = logging.getLogger("plfl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


# ------------------------------------------------------------------ helpers

def synthetic_series(cfg: RunConfig):
    d = cfg.data
    return synth_clients(d.n_clients, length=d.length, scale_spread=d.scale_spread,
                         variance_profile=d.variance_profile, seed=cfg.run.seed,
                         noise=d.noise, weather_coupling=d.weather_coupling)


def load_series(cfg: RunConfig):
    if cfg.data.source == "directory":
        return load_directory(cfg.data.path)
    return synthetic_series(cfg)


def load_datasets(cfg: RunConfig):
    """Per-client datasets; No-FL uses one scaler fitted on the pooled train rows."""
    series = load_series(cfg)
    order = cfg.data.test_before_val
    scaler = pooled_scaler(series, order) if cfg.run.algorithm == "nofl" else None
    return [build_dataset(s, cfg.model.lookback, scaler, order) for s in series]


def personal_path(out: Path, client_id: int) -> Path:
    return out / f"personal_{client_id:03d}.ckpt"


def checkpoint_meta(cfg: RunConfig) -> dict:
    return {"algorithm": cfg.run.algorithm, "server_algo": cfg.run.server_algo,
            "partition": cfg.effective_partition, "seed": cfg.run.seed}


# ----------------------------------------------------------------- commands

def cmd_generate(cfg: RunConfig, out: Path | None = None) -> Path:
    out = Path(out or cfg.data.path or cfg.output_dir() / "data")
    out.mkdir(parents=True, exist_ok=True)
    for s in synthetic_series(cfg):
        write_csv(s, out / f"client_{s.client_id:03d}.csv")
    log.info("wrote %d clients to %s", cfg.data.n_clients, out)
    return out


def cmd_analyze(cfg: RunConfig, out: Path | None = None) -> Path:
    out = Path(out or cfg.output_dir() / "correlations.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = correlation_report(load_series(cfg))
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "kind", "correlation", "flagged"])
        for r in rows:
            w.writerow([r.feature, r.kind, repr(r.correlation), r.flagged])
    return out


def cmd_train(cfg: RunConfig) -> Path:
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    datasets = load_datasets(cfg)
    r, hp = cfg.run, cfg.hyperparams
    meta = checkpoint_meta(cfg)

    def progress(k, _phi, _clients):
        if r.log_every and k % r.log_every == 0:
            log.info("server epoch %d/%d", k, hp.server_epochs)

    if r.algorithm == "nofl":
        theta = run_nofl(datasets, hp, r.seed, cfg.model)
        save_params(out / "shared.ckpt", theta, meta)
        history = []
        report = {"algorithm": "No-FL", "parameters": 0, "kilobits": 0}
    else:
        clients = make_clients(datasets, r.seed)
        if r.algorithm == "fl":
            theta, history = run_fl(clients, hp, r.server_algo, r.seed, cfg.model,
                                    workers=r.workers, callback=progress)
            save_params(out / "shared.ckpt", theta, meta)
        else:
            phi, psi, history = run_plfl(clients, hp, r.server_algo, r.partition, r.seed, cfg.model,
                                         workers=r.workers, callback=progress)
            save_params(out / "shared.ckpt", phi, meta)
            for cid, p in psi.items():
                save_params(personal_path(out, cid), p, {**meta, "client_id": cid})
        report = bandwidth_report(cfg.effective_partition, cfg.model).as_dict()
    write_history(out / "history.jsonl", history)
    (out / "bandwidth.json").write_text(json.dumps(report, indent=2) + "\n")
    log.info("trained %s; outputs in %s", r.algorithm, out)
    return out


def cmd_evaluate(cfg: RunConfig, checkpoint: Path | None = None, split: str = "test") -> Path:
    ckpt_dir = Path(checkpoint or cfg.output_dir())
    out = cfg.output_dir() if checkpoint is None else ckpt_dir
    shared, meta = load_params(ckpt_dir / "shared.ckpt")
    if meta.get("partition") != cfg.effective_partition:
        raise ConfigError(f"run.partition: checkpoint was trained with {meta.get('partition')}, "
                          f"config says {cfg.effective_partition}")
    datasets = load_datasets(cfg)
    partition = LayerPartition.from_id(cfg.effective_partition)
    personal: dict[int, ParamSet] = {}
    if partition.personalized_blocks:
        for ds in datasets:
            path = personal_path(ckpt_dir, ds.client_id)
            if not path.exists():
                raise DataError(f"missing personalized weights {path}")
            personal[ds.client_id] = load_params(path)[0]
    predictor = model_predictor(cfg.model, shared, personal, partition)
    report = evaluate(predictor, datasets, split, cfg.run.algorithm, cfg.effective_partition,
                      raw_sum=cfg.run.mase_raw_sum)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "summary.json")
    (out / "forecasts").mkdir(exist_ok=True)
    for ds in datasets:
        truth, forecast = client_forecast(predictor, ds, split)
        write_forecasts(out / "forecasts" / f"client_{ds.client_id:03d}.csv", ds, truth, forecast, split)
    print(f"{cfg.run.algorithm} {cfg.effective_partition}: mean MAE {report.mean_mae:.6g}, "
          f"mean MASE {report.mean_mase:.6g} over {len(report.clients)} clients")
    return out


def cmd_bandwidth(cfg: RunConfig, partition: str | None = None) -> list[dict]:
    ids = [partition] if partition else list(PARTITION_IDS)
    rows = [bandwidth_report(p, cfg.model).as_dict() for p in ids]
    for row in rows:
        print(f"{row['algorithm']:<18} {row['parameters']:>8} params  {row['kilobits']:>6} kb")
    return rows


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plfl", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="YAML run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config field (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic client CSVs")
    g.add_argument("--out", type=Path)
    a = sub.add_parser("analyze", help="feature/energy correlation table")
    a.add_argument("--out", type=Path)
    sub.add_parser("train", help="run nofl, fl or plfl training")
    e = sub.add_parser("evaluate", help="MAE/MASE of a trained run")
    e.add_argument("--checkpoint", type=Path, help="directory holding shared.ckpt (default: output dir)")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    b = sub.add_parser("bandwidth", help="parameters exchanged per client per server epoch")
    b.add_argument("--partition", choices=PARTITION_IDS)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "generate":
            cmd_generate(cfg, args.out)
        elif args.command == "analyze":
            cmd_analyze(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint, args.split)
        else:
            cmd_bandwidth(cfg, args.partition)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CorrelationError, MetricError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
