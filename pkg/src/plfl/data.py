"""Per-client series ingestion, splitting, scaling, windowing and correlation analysis.

Feature columns, in model input order::

    0 energy   1 time_of_day (0..95)   2 day_of_week (Mon=0..Sun=6)
    3 temperature   4 wind_speed   5 floor_space   6 wall_area   7 window_area

On disk a client is ``<stem>.csv`` with header ``timestamp,energy,temperature,wind_speed``
(ISO-8601 timestamps, 15-minute cadence) plus ``<stem>.json`` holding
``{"floor_space", "wall_area", "window_area"}``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

FEATURES = (
    "energy", "time_of_day", "day_of_week", "temperature", "wind_speed",
    "floor_space", "wall_area", "window_area",
)
STATIC_FEATURES = ("floor_space", "wall_area", "window_area")
TIME_VARYING_FEATURES = ("temperature", "wind_speed")
CSV_COLUMNS = ("timestamp", "energy", "temperature", "wind_speed")
CADENCE = timedelta(minutes=15)
STEPS_PER_DAY = 96


class DataError(ValueError):
    """Input data violates the ingestion or pipeline contract."""


@dataclass
class RawSeries:
    client_id: int
    timestamps: list[datetime]
    values: np.ndarray  # (n_rows, 8) in FEATURES order

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(FEATURES):
            raise DataError(f"client {self.client_id}: expected (rows, {len(FEATURES)}) values")
        if len(self.timestamps) != len(self.values):
            raise DataError(f"client {self.client_id}: {len(self.timestamps)} timestamps for {len(self.values)} rows")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def energy(self) -> np.ndarray:
        return self.values[:, 0]

    def column(self, feature: str) -> np.ndarray:
        return self.values[:, FEATURES.index(feature)]

    def static(self) -> dict[str, float]:
        return {f: float(self.column(f)[0]) for f in STATIC_FEATURES}


def calendar_indices(ts: datetime) -> tuple[int, int]:
    """(15-minute slot of the day, weekday with Monday = 0)."""
    return (ts.hour * 60 + ts.minute) // 15, ts.weekday()


def build_series(client_id: int, timestamps: Sequence[datetime], energy, temperature,
                 wind_speed, static: dict) -> RawSeries:
    """Assemble and validate a RawSeries; calendar features come from the timestamps."""
    for i in range(1, len(timestamps)):
        if timestamps[i] - timestamps[i - 1] != CADENCE:
            raise DataError(
                f"client {client_id}: cadence gap between rows {i} and {i + 1} "
                f"({timestamps[i - 1].isoformat()} -> {timestamps[i].isoformat()})"
            )
    missing = [k for k in STATIC_FEATURES if k not in static]
    if missing:
        raise DataError(f"client {client_id}: static metadata lacks {missing}")
    n = len(timestamps)
    values = np.empty((n, len(FEATURES)))
    values[:, 0] = energy
    cal = np.array([calendar_indices(t) for t in timestamps], dtype=np.float64).reshape(n, 2)
    values[:, 1:3] = cal
    values[:, 3] = temperature
    values[:, 4] = wind_speed
    for j, name in enumerate(STATIC_FEATURES, start=5):
        values[:, j] = float(static[name])
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        row, col = bad[0]
        raise DataError(f"client {client_id}: non-finite {FEATURES[col]} at row {row + 1}")
    return RawSeries(client_id, list(timestamps), values)


def ingest_csv(path: str | Path, static_meta: dict | str | Path | None = None,
               client_id: int = 0) -> RawSeries:
    """Read one client's CSV; static metadata defaults to the sibling ``.json`` file."""
    path = Path(path)
    if static_meta is None:
        static_meta = path.with_suffix(".json")
    if not isinstance(static_meta, dict):
        static_meta = json.loads(Path(static_meta).read_text())

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows")
    try:
        timestamps = [datetime.fromisoformat(r["timestamp"]) for r in rows]
        cols = {c: np.array([float(r[c]) for r in rows]) for c in CSV_COLUMNS[1:]}
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return build_series(client_id, timestamps, cols["energy"], cols["temperature"],
                        cols["wind_speed"], static_meta)


def write_csv(series: RawSeries, path: str | Path) -> None:
    """Write the CSV and its static JSON sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for ts, row in zip(series.timestamps, series.values):
            w.writerow([ts.isoformat(), *(repr(float(row[k])) for k in (0, 3, 4))])
    path.with_suffix(".json").write_text(json.dumps(series.static(), indent=2, sort_keys=True) + "\n")


def load_directory(directory: str | Path) -> list[RawSeries]:
    files = sorted(Path(directory).glob("*.csv"))
    if not files:
        raise DataError(f"{directory}: no client CSV files")
    return [ingest_csv(f, client_id=i) for i, f in enumerate(files)]


# --------------------------------------------------------------- split & scale

def split_bounds(n_rows: int, test_first: bool = False) -> dict[str, tuple[int, int]]:
    """Row ranges of each split.

    Train is the first ``floor(0.8 n)`` rows and the next chunk has
    ``floor(0.1 n)`` rows; the remainder forms the last chunk.  The middle chunk
    is validation by default, test when ``test_first`` is set (test then validation in time).
    """
    n_train = math.floor(0.8 * n_rows)
    n_mid = math.floor(0.1 * n_rows)
    mid, last = ("test", "val") if test_first else ("val", "test")
    return {
        "train": (0, n_train),
        mid: (n_train, n_train + n_mid),
        last: (n_train + n_mid, n_rows),
    }


def split_series(series: RawSeries, lookback: int = 12, test_first: bool = False):
    """Contiguous (train, val, test) value blocks."""
    if len(series) < 3 * (lookback + 1):
        raise DataError(
            f"client {series.client_id}: {len(series)} rows is too short for lookback {lookback}"
        )
    b = split_bounds(len(series), test_first)
    return tuple(series.values[slice(*b[k])] for k in ("train", "val", "test"))


@dataclass
class Scaler:
    minimum: np.ndarray
    maximum: np.ndarray

    @classmethod
    def fit(cls, train: np.ndarray) -> "Scaler":
        train = np.asarray(train, dtype=np.float64)
        if train.size == 0:
            raise DataError("cannot fit a scaler on an empty train set")
        return cls(train.min(axis=0), train.max(axis=0))

    @property
    def span(self) -> np.ndarray:
        span = self.maximum - self.minimum
        # constant features have no span; they map to 0.0
        return np.where(span > 0, span, 1.0)

    def transform(self, values: np.ndarray) -> np.ndarray:
        out = (np.asarray(values, dtype=np.float64) - self.minimum) / self.span
        return np.where(self.maximum > self.minimum, out, 0.0)

    def inverse(self, scaled: np.ndarray) -> np.ndarray:
        return np.asarray(scaled, dtype=np.float64) * self.span + self.minimum

    def inverse_energy(self, scaled) -> np.ndarray:
        return np.asarray(scaled, dtype=np.float64) * self.span[0] + self.minimum[0]


def fit_apply_scaler(train: np.ndarray, *others: np.ndarray):
    """Scale ``train`` and every other block with factors fitted on ``train``.

    Returns ``(scaled_train, [scaled_others...], scaler)``.
    """
    scaler = Scaler.fit(train)
    return scaler.transform(train), [scaler.transform(o) for o in others], scaler


def make_windows(segment: np.ndarray, lookback: int):
    """Stride-1 windows of a (rows x features) segment.

    Returns ``(X, y)`` with ``X`` of shape (rows - lookback, lookback, features)
    and ``y[i] = segment[i + lookback, 0]``.
    """
    segment = np.asarray(segment, dtype=np.float64)
    n = len(segment)
    if n <= lookback:
        raise DataError(f"segment of {n} rows is too short for lookback {lookback}")
    X = np.lib.stride_tricks.sliding_window_view(segment, lookback, axis=0)[: n - lookback]
    return np.ascontiguousarray(X.transpose(0, 2, 1)), segment[lookback:, 0].copy()


@dataclass
class Split:
    X: np.ndarray          # (n, T, l), scaled
    y: np.ndarray          # (n,), scaled energy targets
    y_true: np.ndarray     # (n,), targets in original units
    prev_true: np.ndarray  # (n,), last in-window energy in original units
    timestamps: list[datetime]

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class ClientDataset:
    client_id: int
    train: Split
    val: Split
    test: Split
    scaler: Scaler

    def split(self, name: str) -> Split:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def build_dataset(series: RawSeries, lookback: int = 12, scaler: Scaler | None = None,
                  test_first: bool = False) -> ClientDataset:
    """Split, scale and window one client.  Windows never cross split boundaries.

    ``scaler`` overrides the client's own train-fitted scaler (used for pooled training).
    """
    bounds = split_bounds(len(series), test_first)
    split_series(series, lookback, test_first)  # length check
    if scaler is None:
        scaler = Scaler.fit(series.values[slice(*bounds["train"])])
    parts = {}
    for name, (lo, hi) in bounds.items():
        raw = series.values[lo:hi]
        X, y = make_windows(scaler.transform(raw), lookback)
        parts[name] = Split(
            X=X,
            y=y,
            y_true=raw[lookback:, 0].copy(),
            prev_true=raw[lookback - 1:-1, 0].copy(),
            timestamps=series.timestamps[lo + lookback:hi],
        )
    return ClientDataset(series.client_id, parts["train"], parts["val"], parts["test"], scaler)


def pooled_scaler(series_list: Sequence[RawSeries], test_first: bool = False) -> Scaler:
    """Scaler fitted on the union of every client's train rows."""
    blocks = [s.values[slice(*split_bounds(len(s), test_first)["train"])] for s in series_list]
    return Scaler.fit(np.concatenate(blocks))


# ---------------------------------------------------------------- correlation

class CorrelationError(ValueError):
    """Pearson correlation is undefined for the given inputs."""


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise CorrelationError(f"need two equal-length series of length >= 2, got {a.shape} and {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise CorrelationError("zero variance: correlation undefined")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


@dataclass
class CorrelationRow:
    feature: str
    kind: str  # "static" or "time-varying"
    correlation: float  # nan when flagged
    flagged: str = ""


def correlation_report(series_list: Sequence[RawSeries],
                       static_features: Sequence[str] = STATIC_FEATURES,
                       timevarying_features: Sequence[str] = TIME_VARYING_FEATURES) -> list[CorrelationRow]:
    """Feature/energy correlations in the layout of a static + time-varying table.

    Static rows correlate each client's mean energy with the feature across
    clients.  Time-varying rows correlate within each client and average the
    coefficients over clients that have a defined value.
    """
    rows = []
    mean_energy = np.array([s.energy.mean() for s in series_list])
    for feat in static_features:
        if len(series_list) < 2:
            rows.append(CorrelationRow(feat, "static", math.nan, "needs >= 2 clients"))
            continue
        values = np.array([s.column(feat)[0] for s in series_list])
        try:
            rows.append(CorrelationRow(feat, "static", pearson(values, mean_energy)))
        except CorrelationError as exc:
            rows.append(CorrelationRow(feat, "static", math.nan, str(exc)))
    for feat in timevarying_features:
        coefs, skipped = [], 0
        for s in series_list:
            try:
                coefs.append(pearson(s.column(feat), s.energy))
            except CorrelationError:
                skipped += 1
        if not coefs:
            rows.append(CorrelationRow(feat, "time-varying", math.nan, "zero variance for every client"))
        else:
            note = f"{skipped} client(s) with zero variance skipped" if skipped else ""
            rows.append(CorrelationRow(feat, "time-varying", float(np.mean(coefs)), note))
    return rows


# ------------------------------------------------------------ synthetic data

START = datetime(2018, 1, 1)  # a Monday

# (open slot, close slot, weekend factor, night floor, temperature coupling sign)
ARCHETYPES = {
    "office": (32, 72, 0.15, 0.20, 1.0),
    "hospital": (0, 96, 0.95, 0.85, 0.5),
    "retail": (40, 84, 1.10, 0.10, 1.0),
    "restaurant": (44, 92, 1.20, 0.05, 0.6),
    "school": (28, 64, 0.05, 0.10, -0.5),
    "warehouse": (24, 68, 0.40, 0.35, -1.0),
}


def _smooth_noise(rng: np.random.Generator, n: int, rho: float, scale: float) -> np.ndarray:
    out = np.empty(n)
    x = 0.0
    shocks = rng.normal(0.0, scale * math.sqrt(1 - rho * rho), size=n)
    for i in range(n):
        x = rho * x + shocks[i]
        out[i] = x
    return out


def synth_clients(n_clients: int, length: int = 96 * 28, scale_spread: float = 100.0,
                  variance_profile: str = "mixed", seed: int = 0, noise: float = 0.15,
                  weather_coupling: float = 0.25) -> list[RawSeries]:
    """Heterogeneous synthetic buildings sharing one weather process.

    Magnitudes are log-spaced over ``[1, scale_spread]`` and shuffled.  With
    ``variance_profile="mixed"`` clients cycle through building archetypes whose
    operating hours, weekend behaviour and night load differ; ``"uniform"``
    gives every client the office archetype.  Each client also gets a random
    opening-time phase shift.  ``noise`` is the relative std of white noise.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if scale_spread < 1:
        raise ValueError("scale_spread must be >= 1")
    if variance_profile not in ("mixed", "uniform"):
        raise ValueError(f"unknown variance_profile {variance_profile!r}")
    rng = np.random.default_rng(seed)
    timestamps = [START + i * CADENCE for i in range(length)]
    slot = np.arange(length) % STEPS_PER_DAY
    day = (np.arange(length) // STEPS_PER_DAY) % 7

    hours = np.arange(length) / 4.0
    temperature = (12.0 + 8.0 * np.sin(2 * np.pi * (hours - 9.0) / 24.0)
                   + _smooth_noise(rng, length, 0.995, 3.0))
    wind = np.abs(3.0 + _smooth_noise(rng, length, 0.98, 1.5))
    temp_anomaly = (temperature - temperature.mean()) / temperature.std()

    if n_clients == 1:
        magnitudes = np.array([1.0])
    else:
        magnitudes = np.geomspace(1.0, scale_spread, n_clients)
    magnitudes = magnitudes[rng.permutation(n_clients)]
    names = list(ARCHETYPES) if variance_profile == "mixed" else ["office"]

    series = []
    for cid in range(n_clients):
        open_slot, close_slot, weekend, floor, coupling = ARCHETYPES[names[cid % len(names)]]
        shift = int(rng.integers(-6, 7))
        local = (slot - shift) % STEPS_PER_DAY
        is_open = (local >= open_slot) & (local < close_slot)
        day_factor = np.where(day >= 5, weekend, 1.0)
        shape = floor + (1.0 - floor) * is_open * np.minimum(day_factor, 1.0)
        shape = shape * np.where((day >= 5) & (weekend > 1.0), weekend, 1.0)
        # unit-mean shape keeps the mean load tied to the magnitude
        shape = shape / shape.mean()
        shape = shape * (1.0 + weather_coupling * coupling * temp_anomaly)
        energy = magnitudes[cid] * shape * (1.0 + noise * rng.normal(size=length))
        energy = np.maximum(energy, 0.0)

        floor_space = 5000.0 * magnitudes[cid] * math.exp(rng.normal(0.0, 0.05))
        wall_area = 4.0 * math.sqrt(floor_space) * math.exp(rng.normal(0.0, 0.05))
        static = {
            "floor_space": floor_space,
            "wall_area": wall_area,
            "window_area": 0.3 * wall_area * math.exp(rng.normal(0.0, 0.05)),
        }
        series.append(build_series(cid, timestamps, energy, temperature, wind, static))
    return series
