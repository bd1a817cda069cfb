"""Run configuration: one YAML document with ``model``, ``hyperparams``, ``data`` and ``run`` sections.

Any field can be overridden from the command line with ``section.key=value``;
values are parsed as YAML scalars/lists, so ``model.hidden=[5, 5]`` works.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .model import PARTITION_IDS, ModelConfig
from .optim import SERVER_ALGOS, HyperParams

ALGORITHMS = ("nofl", "fl", "plfl")
OUTPUT_ROOT_ENV = "PLFL_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "directory"
    path: str | None = None    # client CSV directory when source == "directory"
    n_clients: int = 4
    length: int = 96 * 28
    scale_spread: float = 100.0
    variance_profile: str = "mixed"
    noise: float = 0.15
    weather_coupling: float = 0.25
    test_before_val: bool = False

    def __post_init__(self):
        if self.source not in ("synthetic", "directory"):
            raise ValueError("source must be 'synthetic' or 'directory'")
        if self.source == "directory" and not self.path:
            raise ValueError("path is required when source is 'directory'")
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.variance_profile not in ("mixed", "uniform"):
            raise ValueError("variance_profile must be 'mixed' or 'uniform'")


@dataclass
class RunSection:
    algorithm: str = "plfl"
    server_algo: str = "fedadam"
    partition: str = "P1"
    seed: int = 0
    output_dir: str | None = None
    workers: int = 1
    mase_raw_sum: bool = False
    log_every: int = 50

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.server_algo not in SERVER_ALGOS:
            raise ValueError(f"server_algo must be one of {SERVER_ALGOS}")
        if self.partition not in PARTITION_IDS:
            raise ValueError(f"partition must be one of {PARTITION_IDS}")
        if self.algorithm == "plfl" and self.partition == "FL":
            raise ValueError("partition: plfl needs P1, P2 or P3")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    hyperparams: HyperParams = field(default_factory=HyperParams)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunSection = field(default_factory=RunSection)

    @property
    def effective_partition(self) -> str:
        """FL for plain federated training, the configured partition for plfl, FL for nofl."""
        return self.run.partition if self.run.algorithm == "plfl" else "FL"

    def output_dir(self) -> Path:
        if self.run.output_dir:
            return Path(self.run.output_dir)
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        r = self.run
        tag = {"nofl": "nofl", "fl": f"fl-{r.server_algo}", "plfl": f"plfl-{r.partition}-{r.server_algo}"}
        return root / f"{tag[r.algorithm]}-seed{r.seed}"

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            section = asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


SECTIONS = {"model": ModelConfig, "hyperparams": HyperParams, "data": DataConfig, "run": RunSection}


def _coerce(value):
    """YAML 1.1 reads exponent floats without a dot (``1e-3``) as strings; recover them."""
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    if isinstance(value, list):
        return tuple(_coerce(v) for v in value)
    return value


def _build_section(name: str, cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown field")
    text_fields = {"source", "path", "variance_profile", "algorithm", "server_algo", "partition", "output_dir"}
    kwargs = {k: v if k in text_fields else _coerce(v) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def from_dict(doc: dict | None) -> RunConfig:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping of sections")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section (expected {sorted(SECTIONS)})")
    built = {}
    for name, cls in SECTIONS.items():
        values = doc.get(name) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"{name}: expected a mapping")
        built[name] = _build_section(name, cls, values)
    return RunConfig(**built)


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings to a config document (a nested dict)."""
    doc = {k: dict(v or {}) for k, v in (doc or {}).items()}
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"override {item!r}: unknown section {section!r}")
        try:
            value = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from exc
        doc.setdefault(section, {})[name] = value
    return doc


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    doc: dict = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(apply_overrides(doc, overrides or []))
