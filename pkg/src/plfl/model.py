"""Two-stack LSTM forecaster with a PReLU fully connected head.

Parameter naming and canonical order (the order used for flattening and for
checkpoints)::

    lstm1.{f,i,g,o}.{W_x, W_h, b_ih, b_hh}
    lstm2.{f,i,g,o}.{W_x, W_h, b_ih, b_hh}
    fc1.weight, fc1.bias, prelu1.slope, fc2.weight, fc2.bias, prelu2.slope, fc3.weight, fc3.bias

Gate weights are (hidden x input); linear weights are (out x in).  Each gate
carries two additive biases whose sum plays the role of the single gate bias
of the textbook cell.  The top-stack h-states are concatenated time-major
(h_1 first) before the head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

GATES = ("f", "i", "g", "o")
GATE_TENSORS = ("W_x", "W_h", "b_ih", "b_hh")
PRELU_INIT = 0.25


@dataclass(frozen=True)
class ModelConfig:
    lookback: int = 12
    n_features: int = 8
    hidden: tuple[int, int] = (20, 20)
    fc_sizes: tuple[int, ...] = (240, 120, 60, 1)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "fc_sizes", tuple(int(s) for s in self.fc_sizes))
        if self.lookback < 1 or self.n_features < 1:
            raise ValueError("lookback and n_features must be positive")
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ValueError(f"hidden must be two positive sizes, got {self.hidden}")
        if len(self.fc_sizes) < 2 or min(self.fc_sizes) < 1:
            raise ValueError(f"fc_sizes must list at least input and output sizes, got {self.fc_sizes}")
        if self.fc_sizes[0] != self.lookback * self.hidden[1]:
            raise ValueError(
                f"first FC size {self.fc_sizes[0]} must equal lookback x top hidden "
                f"= {self.lookback * self.hidden[1]}"
            )
        if self.fc_sizes[-1] != 1:
            raise ValueError("the head must end in a single output")

    @classmethod
    def reduced(cls, lookback=4, n_features=3, hidden=5) -> "ModelConfig":
        """Small model used for gradient checks; FC widths halve after the input."""
        first = lookback * hidden
        return cls(lookback, n_features, (hidden, hidden), (first, first // 2, first // 4, 1))

    @property
    def n_linear(self) -> int:
        return len(self.fc_sizes) - 1


def param_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """(name, shape) for every parameter, in canonical order."""
    layout = []
    inputs = (config.n_features, config.hidden[0])
    for stack, (n_in, n_hid) in enumerate(zip(inputs, config.hidden), start=1):
        for gate in GATES:
            prefix = f"lstm{stack}.{gate}"
            layout += [
                (f"{prefix}.W_x", (n_hid, n_in)),
                (f"{prefix}.W_h", (n_hid, n_hid)),
                (f"{prefix}.b_ih", (n_hid,)),
                (f"{prefix}.b_hh", (n_hid,)),
            ]
    sizes = config.fc_sizes
    for k in range(config.n_linear):
        layout += [(f"fc{k + 1}.weight", (sizes[k + 1], sizes[k])), (f"fc{k + 1}.bias", (sizes[k + 1],))]
        if k < config.n_linear - 1:
            layout.append((f"prelu{k + 1}.slope", (sizes[k + 1],)))
    return layout


class ParamSet:
    """Ordered mapping of parameter name to float64 array.

    Iteration order is insertion order, which for model parameters is the
    canonical order of :func:`param_layout`.
    """

    def __init__(self, items: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        pairs = items.items() if isinstance(items, Mapping) else items
        self._arrays: dict[str, np.ndarray] = {
            name: np.asarray(value, dtype=np.float64) for name, value in pairs
        }

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: object) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} tensors, {self.size} values)"

    def items(self):
        return self._arrays.items()

    @property
    def names(self) -> list[str]:
        return list(self._arrays)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self._arrays.values()]

    @property
    def size(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self._arrays.items())

    def replace(self, name: str, value: np.ndarray) -> "ParamSet":
        """Copy with one tensor swapped for ``value`` of the same shape."""
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._arrays[name].shape:
            raise ValueError(f"{name}: shape {value.shape} does not match {self._arrays[name].shape}")
        return ParamSet((n, value if n == name else a) for n, a in self._arrays.items())

    def subset(self, names: Iterable[str]) -> "ParamSet":
        return ParamSet((n, self._arrays[n]) for n in names)

    def flatten(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamSet":
        """A ParamSet with this one's names and shapes filled from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValueError(f"expected a flat vector of length {self.size}, got shape {flat.shape}")
        out, offset = [], 0
        for name, a in self._arrays.items():
            out.append((name, flat[offset:offset + a.size].reshape(a.shape).copy()))
            offset += a.size
        return ParamSet(out)

    def equal(self, other: "ParamSet") -> bool:
        """Bit-exact equality of names, order, shapes and values."""
        return self.names == other.names and all(
            self[n].shape == other[n].shape and np.array_equal(self[n], other[n]) for n in self
        )


def init_params(config: ModelConfig, seed: int) -> ParamSet:
    """Uniform(+-1/sqrt(fan_in)) weights, PReLU slopes at 0.25.

    A bias takes the fan-in of the weight it is added to (``b_ih`` pairs with
    ``W_x``, ``b_hh`` with ``W_h``).
    """
    rng = np.random.default_rng(seed)
    layout = param_layout(config)
    shapes = dict(layout)
    params = []
    for name, shape in layout:
        if name.endswith(".slope"):
            params.append((name, np.full(shape, PRELU_INIT)))
            continue
        if name.endswith(".b_ih"):
            fan_in = shapes[name[:-4] + "W_x"][1]
        elif name.endswith(".b_hh"):
            fan_in = shapes[name[:-4] + "W_h"][1]
        elif name.endswith(".bias"):
            fan_in = shapes[name[:-4] + "weight"][1]
        else:
            fan_in = shape[1]
        bound = 1.0 / np.sqrt(fan_in)
        params.append((name, rng.uniform(-bound, bound, size=shape)))
    return ParamSet(params)


def count_params(config: ModelConfig) -> dict[str, int]:
    """Scalar counts per block: lstm1, lstm2, head, total."""
    counts = {"lstm1": 0, "lstm2": 0, "head": 0}
    for name, shape in param_layout(config):
        counts[block_of(name)] += int(np.prod(shape))
    counts["total"] = sum(counts.values())
    return counts


def block_of(name: str) -> str:
    group = name.split(".", 1)[0]
    if group in ("lstm1", "lstm2"):
        return group
    if group.startswith("fc") or group.startswith("prelu"):
        return "head"
    raise KeyError(f"unknown parameter name {name!r}")


# ---------------------------------------------------------------- forward pass

def lstm_cell_forward(stack: Mapping[str, Tensor], s_prev: Tensor, h_prev: Tensor, x: Tensor):
    """One step of the LSTM cell on a batch; returns (s, h).

    ``stack`` maps ``"{gate}.{W_x|W_h|b_ih|b_hh}"`` to tensors.  States are
    (batch x hidden), ``x`` is (batch x input).
    """
    def pre(gate):
        return ad.affine(
            [(x, stack[f"{gate}.W_x"]), (h_prev, stack[f"{gate}.W_h"])],
            [stack[f"{gate}.b_ih"], stack[f"{gate}.b_hh"]],
        )

    f = ad.sigmoid(pre("f"))
    i = ad.sigmoid(pre("i"))
    g = ad.tanh(pre("g"))
    o = ad.sigmoid(pre("o"))
    s = ad.add(ad.hadamard(g, i), ad.hadamard(s_prev, f))
    h = ad.hadamard(ad.tanh(s), o)
    return s, h


def _stack(tensors: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}


def forward(tensors: Mapping[str, Tensor], X: np.ndarray, config: ModelConfig) -> Tensor:
    """Batched forecast: ``X`` is (batch x lookback x features), result is (batch x 1)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != (config.lookback, config.n_features):
        raise ad.DimensionError(
            f"expected windows of shape (batch, {config.lookback}, {config.n_features}), got {X.shape}"
        )
    batch = X.shape[0]
    stack1, stack2 = _stack(tensors, "lstm1"), _stack(tensors, "lstm2")
    h1 = s1 = Tensor(np.zeros((batch, config.hidden[0])))
    h2 = s2 = Tensor(np.zeros((batch, config.hidden[1])))
    top_states = []
    for t in range(config.lookback):
        s1, h1 = lstm_cell_forward(stack1, s1, h1, Tensor(X[:, t, :]))
        s2, h2 = lstm_cell_forward(stack2, s2, h2, h1)
        top_states.append(h2)

    z = ad.concat(top_states, axis=1) if len(top_states) > 1 else top_states[0]
    for k in range(1, config.n_linear + 1):
        z = ad.affine([(z, tensors[f"fc{k}.weight"])], [tensors[f"fc{k}.bias"]])
        if k < config.n_linear:
            z = ad.prelu(z, tensors[f"prelu{k}.slope"])
    return z


def _constants(params: ParamSet) -> dict[str, Tensor]:
    return {name: Tensor(a) for name, a in params.items()}


def predict(params: ParamSet, X: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Scaled one-step forecasts for a batch of windows, shape (batch,)."""
    return forward(_constants(params), X, config).data[:, 0].copy()


def model_forward(params: ParamSet, window: np.ndarray, config: ModelConfig) -> float:
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (config.lookback, config.n_features):
        raise ad.DimensionError(
            f"window must be ({config.lookback}, {config.n_features}), got {window.shape}"
        )
    return float(predict(params, window[None], config)[0])


def squared_error(y_hat: float, y: float) -> float:
    return (y_hat - y) ** 2


def batch_loss(tensors: Mapping[str, Tensor], X: np.ndarray, y: np.ndarray, config: ModelConfig) -> Tensor:
    """Mean squared error over the batch as a 0-d tensor."""
    y_hat = forward(tensors, X, config)
    target = Tensor(np.asarray(y, dtype=np.float64).reshape(-1, 1))
    return ad.mean(ad.square(ad.sub(y_hat, target)))


def loss_and_grad(params: ParamSet, X: np.ndarray, y: np.ndarray, config: ModelConfig):
    """Minibatch MSE and its gradient with respect to every parameter."""
    tape = Tape()
    tensors = {name: tape.leaf(name, a) for name, a in params.items()}
    loss = batch_loss(tensors, X, y, config)
    grads = ad.backward(tape, loss)
    return float(loss.data), ParamSet((name, grads[name].data) for name in params)


def loss_value(params: ParamSet, X: np.ndarray, y: np.ndarray, config: ModelConfig) -> float:
    return float(batch_loss(_constants(params), X, y, config).data)


# ------------------------------------------------------------ personalization

@dataclass(frozen=True)
class LayerPartition:
    """Which blocks (``lstm1``, ``lstm2``, ``head``) stay on the client."""

    config_id: str
    personalized_blocks: frozenset[str]

    _BLOCKS = {
        "FL": frozenset(),
        "P1": frozenset({"head"}),
        "P2": frozenset({"head", "lstm2"}),
        "P3": frozenset({"head", "lstm2", "lstm1"}),
    }

    @classmethod
    def from_id(cls, config_id: str) -> "LayerPartition":
        key = config_id.upper()
        if key not in cls._BLOCKS:
            raise ValueError(f"unknown partition {config_id!r}; expected one of {sorted(cls._BLOCKS)}")
        return cls(key, cls._BLOCKS[key])

    def assign(self, name: str) -> str:
        return "personalized" if block_of(name) in self.personalized_blocks else "shared"

    def shared_names(self, names: Iterable[str]) -> list[str]:
        return [n for n in names if self.assign(n) == "shared"]

    def personalized_names(self, names: Iterable[str]) -> list[str]:
        return [n for n in names if self.assign(n) == "personalized"]


PARTITION_IDS = ("FL", "P1", "P2", "P3")


def split_params(params: ParamSet, partition: LayerPartition) -> tuple[ParamSet, ParamSet]:
    """(shared, personalized) halves, each in canonical relative order."""
    blocks = {block_of(n) for n in params}  # raises on unknown names
    missing = partition.personalized_blocks - blocks
    if missing:
        raise KeyError(f"partition {partition.config_id} names blocks absent from parameters: {sorted(missing)}")
    shared = params.subset(partition.shared_names(params))
    personal = params.subset(partition.personalized_names(params))
    return shared, personal


def merge_params(shared: ParamSet, personal: ParamSet, config: ModelConfig) -> ParamSet:
    overlap = set(shared) & set(personal)
    if overlap:
        raise ValueError(f"shared and personalized sets overlap: {sorted(overlap)}")
    out = []
    for name, shape in param_layout(config):
        source = shared if name in shared else personal
        if name not in source:
            raise KeyError(f"parameter {name!r} missing from both halves")
        if source[name].shape != shape:
            raise ValueError(f"{name}: shape {source[name].shape} does not match config {shape}")
        out.append((name, source[name]))
    return ParamSet(out)


# ----------------------------------------------------------------- checkpoints

_MAGIC = b"PLFLPS01"


def save_params(path: str | Path, params: ParamSet, meta: Mapping | None = None) -> None:
    """Write ``MAGIC | u64 header length | JSON header | float64 LE values``."""
    header = {
        "dtype": "<f8",
        "params": [{"name": n, "shape": list(params[n].shape)} for n in params],
        "meta": dict(meta or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(params.flatten().astype("<f8").tobytes())


def load_params(path: str | Path) -> tuple[ParamSet, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    values = np.frombuffer(raw[16 + n:], dtype="<f8").astype(np.float64)
    template = ParamSet((p["name"], np.zeros(p["shape"])) for p in header["params"])
    if values.size != template.size:
        raise ValueError(f"{path}: header describes {template.size} values, found {values.size}")
    return template.unflatten(values), header["meta"]
