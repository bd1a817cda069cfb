import numpy as np
import pytest

from plfl.data import build_dataset, synth_clients
from plfl.model import ModelConfig


def central_difference(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Normwise relative error between two gradient arrays (0 when both vanish)."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig.reduced(n_features=8)


@pytest.fixture(scope="session")
def small_datasets(small_config):
    raws = synth_clients(3, length=96 * 4, scale_spread=10, seed=7)
    return [build_dataset(r, small_config.lookback) for r in raws]


ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_acceptance(criterion: str, passed: bool, detail: str = "") -> None:
    """Register an acceptance verdict; recorded before asserting so failures are reported too."""
    ACCEPTANCE_RESULTS.append((criterion, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")
