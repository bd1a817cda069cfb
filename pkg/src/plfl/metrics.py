"""MAE / MASE on original-unit forecasts and per-client evaluation reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import ClientDataset
from .model import LayerPartition, ModelConfig, ParamSet, merge_params, predict


class MetricError(ValueError):
    """A metric is undefined for the given series."""


def _pair(truth, forecast) -> tuple[np.ndarray, np.ndarray]:
    truth = np.asarray(truth, dtype=np.float64).ravel()
    forecast = np.asarray(forecast, dtype=np.float64).ravel()
    if truth.shape != forecast.shape:
        raise MetricError(f"length mismatch: {truth.size} truth vs {forecast.size} forecast values")
    if truth.size == 0:
        raise MetricError("empty series")
    return truth, forecast


def mae(truth, forecast) -> float:
    truth, forecast = _pair(truth, forecast)
    return float(np.mean(np.abs(truth - forecast)))


def mase(truth, forecast, previous: float | None = None, raw_sum: bool = False) -> float:
    """MAE divided by the mean absolute one-step change of ``truth``.

    ``previous`` is the observation just before ``truth[0]``; when given, it is
    prepended to the series the denominator is computed from, so the
    last-value forecaster scores exactly 1 on the evaluated points.
    ``raw_sum=True`` divides by the sum of changes instead of their mean.
    """
    truth, forecast = _pair(truth, forecast)
    reference = truth if previous is None else np.concatenate([[float(previous)], truth])
    if reference.size < 2:
        raise MetricError("MASE needs at least two points")
    changes = np.abs(np.diff(reference))
    scale = changes.sum() if raw_sum else changes.mean()
    if scale == 0:
        raise MetricError("truth series is constant: MASE undefined")
    return mae(truth, forecast) / float(scale)


@dataclass
class ClientMetrics:
    client_id: int
    mae: float
    mase: float


@dataclass
class EvalReport:
    algorithm: str
    partition: str
    split: str
    clients: list[ClientMetrics] = field(default_factory=list)

    @property
    def mean_mae(self) -> float:
        return float(np.mean([c.mae for c in self.clients]))

    @property
    def mean_mase(self) -> float:
        return float(np.mean([c.mase for c in self.clients]))

    def summary(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "partition": self.partition,
            "split": self.split,
            "n_clients": len(self.clients),
            "mean_mae": self.mean_mae,
            "mean_mase": self.mean_mase,
            "clients": [vars(c) for c in self.clients],
        }

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["client_id", "mae", "mase"])
            for c in self.clients:
                w.writerow([c.client_id, repr(c.mae), repr(c.mase)])

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n")


Predictor = Callable[[int, np.ndarray], np.ndarray]


def model_predictor(config: ModelConfig, shared: ParamSet,
                    personal: Mapping[int, ParamSet] | None = None,
                    partition: LayerPartition | None = None) -> Predictor:
    """Scaled forecasts for client ``cid`` from shared weights plus that client's own layers."""
    partition = partition or LayerPartition.from_id("FL")
    personal = personal or {}

    def forecast(cid: int, X: np.ndarray) -> np.ndarray:
        if partition.personalized_blocks:
            if cid not in personal:
                raise KeyError(f"no personalized weights for client {cid} under {partition.config_id}")
            params = merge_params(shared, personal[cid], config)
        else:
            params = shared
        return predict(params, X, config)

    return forecast


def client_forecast(predictor: Predictor, dataset: ClientDataset, split: str) -> tuple[np.ndarray, np.ndarray]:
    """(truth, forecast) for one client's split, both in original units."""
    part = dataset.split(split)
    scaled = np.asarray(predictor(dataset.client_id, part.X), dtype=np.float64)
    return part.y_true, dataset.scaler.inverse_energy(scaled)


def evaluate(predictor: Predictor, datasets: Sequence[ClientDataset], split: str = "test",
             algorithm: str = "", partition: str = "", raw_sum: bool = False) -> EvalReport:
    report = EvalReport(algorithm, partition, split)
    for ds in datasets:
        truth, forecast = client_forecast(predictor, ds, split)
        previous = ds.split(split).prev_true[0]
        report.clients.append(ClientMetrics(
            ds.client_id, mae(truth, forecast), mase(truth, forecast, previous, raw_sum=raw_sum)
        ))
    return report


def write_forecasts(path: str | Path, dataset: ClientDataset, truth, forecast, split: str = "test") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "truth", "forecast"])
        for ts, t, f in zip(dataset.split(split).timestamps, truth, forecast):
            w.writerow([ts.isoformat(), repr(float(t)), repr(float(f))])
