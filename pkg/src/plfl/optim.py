"""Client-side Adam and the three server update rules on flat parameter vectors.

All functions are pure: they return new state and new parameters and never
modify their arguments.  Server rules carry no bias correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SERVER_ALGOS = ("fedavg", "fedavgm", "fedadam")
DEFAULT_SERVER_LR = {"fedavg": 1.0, "fedavgm": 1.0, "fedadam": 0.01}


@dataclass
class HyperParams:
    server_epochs: int = 2000
    client_epochs: int = 4
    server_lr: float | None = None  # None -> per-algorithm default
    client_lr: float = 1e-3
    client_beta1: float = 0.9
    client_beta2: float = 0.999
    client_eps: float = 1e-8
    server_beta1: float = 0.99
    server_beta2: float = 0.999
    server_eps: float = 1e-8
    batch_size: int = 64
    resample_per_client_epoch: bool = False
    nofl_epochs: int = 8000
    nofl_lr: float = 1e-3

    def __post_init__(self):
        if self.server_epochs < 0 or self.client_epochs < 0 or self.nofl_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        lrs = [self.client_lr, self.nofl_lr] + ([] if self.server_lr is None else [self.server_lr])
        if min(lrs) <= 0:
            raise ValueError("learning rates must be positive")
        for name in ("client_beta1", "client_beta2", "server_beta1", "server_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.client_eps <= 0 or self.server_eps <= 0:
            raise ValueError("epsilons must be positive")

    def server_lr_for(self, algo: str) -> float:
        return DEFAULT_SERVER_LR[algo] if self.server_lr is None else self.server_lr


def _check_lengths(*vectors: np.ndarray) -> None:
    n = vectors[0].shape
    for v in vectors[1:]:
        if v.shape != n:
            raise ValueError(f"length mismatch: {n} vs {v.shape}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0  # completed steps; the next update uses step + 1

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_delta(state: AdamState, g, lr, beta1, beta2, eps):
    """Bias-corrected Adam move for gradient ``g``; returns (new_state, step) with theta_new = theta - step."""
    g = np.asarray(g, dtype=np.float64)
    _check_lengths(g, state.m, state.v)
    k = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1 ** k)
    v_hat = v / (1.0 - beta2 ** k)
    return AdamState(m, v, k), lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_step(state: AdamState, theta, g, lr, beta1, beta2, eps):
    """One bias-corrected Adam update; returns (new_state, new_theta)."""
    theta = np.asarray(theta, dtype=np.float64)
    _check_lengths(theta, np.asarray(g))
    state, step = adam_delta(state, g, lr, beta1, beta2, eps)
    return state, theta - step


@dataclass
class FedAvgState:
    pass


@dataclass
class FedAvgMomentumState:
    m: np.ndarray


@dataclass
class FedAdamState:
    m: np.ndarray
    v: np.ndarray


ServerState = FedAvgState | FedAvgMomentumState | FedAdamState


def init_server_state(algo: str, n: int, eps: float = 1e-8) -> ServerState:
    if algo == "fedavg":
        return FedAvgState()
    if algo == "fedavgm":
        return FedAvgMomentumState(np.zeros(n))
    if algo == "fedadam":
        return FedAdamState(np.zeros(n), np.full(n, eps * eps))
    raise ValueError(f"unknown server algorithm {algo!r}; expected one of {SERVER_ALGOS}")


def fedavg_update(theta, delta, lr):
    theta, delta = np.asarray(theta, dtype=np.float64), np.asarray(delta, dtype=np.float64)
    _check_lengths(theta, delta)
    return theta - lr * delta


def fedavgm_update(state: FedAvgMomentumState, theta, delta, lr, beta1):
    theta, delta = np.asarray(theta, dtype=np.float64), np.asarray(delta, dtype=np.float64)
    _check_lengths(theta, delta, state.m)
    m = beta1 * state.m + (1.0 - beta1) * delta
    return FedAvgMomentumState(m), theta - lr * m


def fedadam_update(state: FedAdamState, theta, delta, lr, beta1, beta2, eps):
    theta, delta = np.asarray(theta, dtype=np.float64), np.asarray(delta, dtype=np.float64)
    _check_lengths(theta, delta, state.m, state.v)
    m = beta1 * state.m + (1.0 - beta1) * delta
    v = beta2 * state.v + (1.0 - beta2) * (delta * delta)
    return FedAdamState(m, v), theta - lr * m / (np.sqrt(v) + eps)


def server_update(algo: str, state: ServerState, theta, delta, hp: HyperParams):
    """Dispatch to the chosen server rule; returns (new_state, new_theta)."""
    lr = hp.server_lr_for(algo)
    if algo == "fedavg":
        return state, fedavg_update(theta, delta, lr)
    if algo == "fedavgm":
        return fedavgm_update(state, theta, delta, lr, hp.server_beta1)
    if algo == "fedadam":
        return fedadam_update(state, theta, delta, lr, hp.server_beta1, hp.server_beta2, hp.server_eps)
    raise ValueError(f"unknown server algorithm {algo!r}; expected one of {SERVER_ALGOS}")
