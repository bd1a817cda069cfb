"""In-process simulation of federated training with optional personalization layers.

The server and clients only talk through a :class:`Channel`; every message is
logged there (names and sizes always, payloads on request) so the exchange can
be audited.  Client updates inside a round are independent and may run on a
thread pool; aggregation always reduces in ascending client id order, so the
result does not depend on the number of workers.

Seeding: the initial model comes from ``init_params(config, seed)``; client
``m`` draws minibatches from ``SeedSequence(seed, spawn_key=(1, m))``; the
pooled No-FL trainer uses ``SeedSequence(seed, spawn_key=(2,))``.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import ClientDataset
from .model import (
    LayerPartition, ModelConfig, ParamSet, count_params, init_params, loss_and_grad,
    loss_value, merge_params, split_params,
)
from .optim import AdamState, HyperParams, adam_delta, adam_step, init_server_state, server_update

log = logging.getLogger(__name__)

BITS_PER_PARAM = 32


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or weight."""


def client_seed(seed: int, client_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(1, client_id))


@dataclass
class Client:
    client_id: int
    dataset: ClientDataset
    rng: np.random.Generator
    personal: ParamSet | None = None


def make_clients(datasets: Sequence[ClientDataset], seed: int) -> list[Client]:
    return [Client(ds.client_id, ds, np.random.default_rng(client_seed(seed, ds.client_id)))
            for ds in datasets]


# ------------------------------------------------------------------ messaging

@dataclass
class Message:
    epoch: int
    sender: str
    recipient: str
    kind: str  # "weights" (server -> client) or "pseudo_gradient"
    names: tuple[str, ...]
    n_values: int
    payload: ParamSet | None = None


class Channel:
    """Audit log of every server/client exchange."""

    def __init__(self, keep_payloads: bool = False):
        self.keep_payloads = keep_payloads
        self.messages: list[Message] = []

    def send(self, epoch: int, sender: str, recipient: str, kind: str, payload: ParamSet) -> ParamSet:
        self.messages.append(Message(
            epoch, sender, recipient, kind, tuple(payload.names), payload.size,
            payload.copy() if self.keep_payloads else None,
        ))
        return payload

    def values_between(self, client_id: int) -> int:
        name = f"client{client_id}"
        return sum(m.n_values for m in self.messages if name in (m.sender, m.recipient))


@dataclass
class RoundReport:
    epoch: int
    train_loss: dict[int, float]
    params_sent: dict[int, int]       # client -> server
    params_received: dict[int, int]   # server -> client
    duration: float

    def records(self):
        for cid in sorted(self.train_loss):
            yield {
                "epoch": self.epoch,
                "client_id": cid,
                "train_loss": self.train_loss[cid],
                "params_sent": self.params_sent[cid],
                "params_received": self.params_received[cid],
            }


def write_history(path: str | Path, history: Sequence[RoundReport]) -> None:
    with open(path, "w") as fh:
        for report in history:
            for rec in report.records():
                fh.write(json.dumps(rec) + "\n")


# -------------------------------------------------------------- client side

def sample_minibatch(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    if n == 0:
        raise ValueError("client has an empty training set")
    if size > n:
        log.warning("batch size %d exceeds %d training windows; sampling with replacement", size, n)
        return rng.choice(n, size=size, replace=True)
    return rng.choice(n, size=size, replace=False)


@dataclass
class ClientResult:
    client_id: int
    pseudo_gradient: ParamSet  # over shared names
    personal: ParamSet
    train_loss: float
    batch_size: int


def local_round(start: ParamSet, dataset: ClientDataset, hp: HyperParams,
                rng: np.random.Generator, config: ModelConfig, client_id: int = 0):
    """K' Adam steps from ``start`` with fresh optimizer state.

    The optimizer tracks the displacement ``d`` from ``start`` and evaluates the
    model at ``start - d``.  Returns (d, loss at the first step, batch size).
    Working in displacements makes the pseudo-gradient exactly ``d`` rather
    than a rounded difference of two weight vectors.
    """
    train = dataset.train
    idx = sample_minibatch(rng, len(train), hp.batch_size)
    theta0 = start.flatten()
    disp = np.zeros_like(theta0)
    state = AdamState.zeros(theta0.size)
    first_loss = None
    for step in range(hp.client_epochs):
        if hp.resample_per_client_epoch and step > 0:
            idx = sample_minibatch(rng, len(train), hp.batch_size)
        loss, grads = loss_and_grad(start.unflatten(theta0 - disp), train.X[idx], train.y[idx], config)
        if first_loss is None:
            first_loss = loss
        if not math.isfinite(loss):
            raise DivergenceError(f"client {client_id}: non-finite loss {loss}")
        state, move = adam_delta(state, grads.flatten(), hp.client_lr,
                                 hp.client_beta1, hp.client_beta2, hp.client_eps)
        disp = disp + move
    if first_loss is None:
        first_loss = loss_value(start, train.X[idx], train.y[idx], config)
    if not np.all(np.isfinite(disp)):
        raise DivergenceError(f"client {client_id}: non-finite weights")
    return disp, first_loss, len(idx)


def client_update(received: ParamSet, client: Client, hp: HyperParams,
                  partition: LayerPartition, config: ModelConfig) -> ClientResult:
    """Local Adam epochs from ``[received, client.personal]``; Adam state starts at zero."""
    personal = client.personal if client.personal is not None else ParamSet()
    start = merge_params(received, personal, config)
    disp, first_loss, batch = local_round(start, client.dataset, hp, client.rng, config, client.client_id)
    shared_disp, personal_disp = split_params(start.unflatten(disp), partition)
    new_personal = personal.unflatten(personal.flatten() - personal_disp.flatten())
    pseudo = received.unflatten(shared_disp.flatten())
    return ClientResult(client.client_id, pseudo, new_personal, first_loss, batch)


def aggregate(pseudo_gradients: Sequence[np.ndarray], batch_sizes: Sequence[int]) -> np.ndarray:
    """Batch-size weighted average, reduced in the given (client id) order."""
    if not pseudo_gradients:
        raise ValueError("nothing to aggregate")
    if len(pseudo_gradients) != len(batch_sizes):
        raise ValueError("one batch size per pseudo-gradient is required")
    if min(batch_sizes) < 1:
        raise ValueError("batch sizes must be >= 1")
    n = np.asarray(pseudo_gradients[0]).shape
    total = float(sum(batch_sizes))
    delta = np.zeros(n)
    for g, b in zip(pseudo_gradients, batch_sizes):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != n:
            raise ValueError(f"length mismatch: {g.shape} vs {n}")
        delta = delta + (b / total) * g
    return delta


# -------------------------------------------------------------- server loops

def _run(clients: Sequence[Client], hp: HyperParams, server_algo: str,
         partition: LayerPartition, config: ModelConfig, seed: int,
         init: ParamSet | None, workers: int, channel: Channel | None,
         callback: Callable | None):
    if not clients:
        raise ValueError("at least one client is required")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError("client ids must be unique")
    clients = sorted(clients, key=lambda c: c.client_id)
    channel = channel if channel is not None else Channel()

    theta0 = init.copy() if init is not None else init_params(config, seed)
    shared0, personal0 = split_params(theta0, partition)
    for c in clients:
        if c.personal is None:
            c.personal = personal0.copy()
        elif sorted(c.personal.names) != sorted(personal0.names):
            raise ValueError(f"client {c.client_id}: personalized names do not match {partition.config_id}")

    phi = shared0.flatten()
    server_state = init_server_state(server_algo, phi.size, hp.server_eps)
    history: list[RoundReport] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for k in range(1, hp.server_epochs + 1):
            start = time.perf_counter()
            broadcast = shared0.unflatten(phi)
            received = {c.client_id: channel.send(k, "server", f"client{c.client_id}", "weights", broadcast)
                        for c in clients}

            def work(c):
                return client_update(received[c.client_id], c, hp, partition, config)

            try:
                results = list(pool.map(work, clients)) if pool else [work(c) for c in clients]
            except DivergenceError as exc:
                raise DivergenceError(f"server epoch {k}: {exc}") from exc

            for c, r in zip(clients, results):
                c.personal = r.personal
                channel.send(k, f"client{c.client_id}", "server", "pseudo_gradient", r.pseudo_gradient)
            delta = aggregate([r.pseudo_gradient.flatten() for r in results],
                              [r.batch_size for r in results])
            server_state, phi = server_update(server_algo, server_state, phi, delta, hp)
            if not np.all(np.isfinite(phi)):
                raise DivergenceError(f"server epoch {k}: non-finite shared weights")

            history.append(RoundReport(
                epoch=k,
                train_loss={r.client_id: r.train_loss for r in results},
                params_sent={r.client_id: r.pseudo_gradient.size for r in results},
                params_received={c.client_id: broadcast.size for c in clients},
                duration=time.perf_counter() - start,
            ))
            if callback is not None:
                callback(k, shared0.unflatten(phi), clients)
    finally:
        if pool:
            pool.shutdown()
    return shared0.unflatten(phi), {c.client_id: c.personal for c in clients}, history


def run_fl(clients: Sequence[Client], hp: HyperParams, server_algo: str = "fedadam",
           seed: int = 0, config: ModelConfig | None = None, init: ParamSet | None = None,
           workers: int = 1, channel: Channel | None = None, callback: Callable | None = None):
    """Federated training of the whole model; returns (theta, history)."""
    config = config or ModelConfig()
    theta, _, history = _run(clients, hp, server_algo, LayerPartition.from_id("FL"), config,
                             seed, init, workers, channel, callback)
    return theta, history


def run_plfl(clients: Sequence[Client], hp: HyperParams, server_algo: str = "fedadam",
             partition: LayerPartition | str = "P1", seed: int = 0,
             config: ModelConfig | None = None, init: ParamSet | None = None, workers: int = 1,
             channel: Channel | None = None, callback: Callable | None = None):
    """Federated training of the shared layers only; returns (phi, {client: psi}, history).

    Every client starts its personalized layers from the same initial model as
    the server's shared layers.
    """
    config = config or ModelConfig()
    if isinstance(partition, str):
        partition = LayerPartition.from_id(partition)
    if not partition.personalized_blocks:
        raise ValueError("run_plfl needs a partition with personalized layers (P1, P2 or P3)")
    return _run(clients, hp, server_algo, partition, config, seed, init, workers, channel, callback)


def train_local(params: ParamSet, dataset: ClientDataset, hp: HyperParams,
                rng: np.random.Generator, config: ModelConfig, epochs: int | None = None) -> ParamSet:
    """Client-only training with the federated schedule but no server.

    Each of ``epochs`` rounds (default ``hp.server_epochs``) samples one
    minibatch, zeroes Adam and takes ``hp.client_epochs`` steps.
    """
    epochs = hp.server_epochs if epochs is None else epochs
    for _ in range(epochs):
        disp, _, _ = local_round(params, dataset, hp, rng, config)
        params = params.unflatten(params.flatten() - disp)
    return params


def run_nofl(datasets: Sequence[ClientDataset], hp: HyperParams, seed: int = 0,
             config: ModelConfig | None = None, init: ParamSet | None = None,
             epochs: int | None = None, lr: float | None = None) -> ParamSet:
    """Centralized baseline: persistent Adam over minibatches of the pooled train windows.

    One epoch is one minibatch step.  The datasets should share a pooled scaler.
    """
    if not datasets:
        raise ValueError("at least one client is required")
    config = config or ModelConfig()
    epochs = hp.nofl_epochs if epochs is None else epochs
    lr = hp.nofl_lr if lr is None else lr
    X = np.concatenate([ds.train.X for ds in datasets])
    y = np.concatenate([ds.train.y for ds in datasets])
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    params = init.copy() if init is not None else init_params(config, seed)
    theta = params.flatten()
    state = AdamState.zeros(theta.size)
    for epoch in range(1, epochs + 1):
        idx = sample_minibatch(rng, len(y), hp.batch_size)
        loss, grads = loss_and_grad(params.unflatten(theta), X[idx], y[idx], config)
        if not math.isfinite(loss):
            raise DivergenceError(f"No-FL epoch {epoch}: non-finite loss {loss}")
        state, theta = adam_step(state, theta, grads.flatten(), lr,
                                 hp.client_beta1, hp.client_beta2, hp.client_eps)
    return params.unflatten(theta)


# ------------------------------------------------------------ communication

PARTITION_LABELS = {"FL": "FL", "P1": "PL-FL Config. 1", "P2": "PL-FL Config. 2", "P3": "PL-FL Config. 3"}


@dataclass
class BandwidthReport:
    algorithm: str
    parameters: int   # exchanged per client per server epoch (send + receive)
    kilobits: int     # parameters * 32 / 1024, floored

    def as_dict(self) -> dict:
        return {"algorithm": self.algorithm, "parameters": self.parameters, "kilobits": self.kilobits}


def shared_count(partition: LayerPartition, config: ModelConfig) -> int:
    counts = count_params(config)
    return sum(counts[b] for b in ("lstm1", "lstm2", "head") if b not in partition.personalized_blocks)


def bandwidth_report(partition: LayerPartition | str, config: ModelConfig | None = None) -> BandwidthReport:
    config = config or ModelConfig()
    if isinstance(partition, str):
        partition = LayerPartition.from_id(partition)
    params = 2 * shared_count(partition, config)
    return BandwidthReport(PARTITION_LABELS[partition.config_id], params, params * BITS_PER_PARAM // 1024)
