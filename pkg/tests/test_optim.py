import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plfl.optim import (
    AdamState, FedAdamState, FedAvgMomentumState, HyperParams, adam_step, fedadam_update,
    fedavg_update, fedavgm_update, init_server_state, server_update,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vec = arrays(np.float64, 5, elements=finite)


def test_adam_zero_gradient_keeps_theta():
    theta = np.array([1.0, -2.0, 3.0])
    state, out = adam_step(AdamState.zeros(3), theta, np.zeros(3), 1e-3, 0.9, 0.999, 1e-8)
    np.testing.assert_array_equal(out, theta)
    assert state.step == 1


def test_adam_first_step_closed_form():
    # first step: m_hat = g and v_hat = g^2, so the move is lr * g / (|g| + eps)
    _, out = adam_step(AdamState.zeros(1), np.array([1.0]), np.array([0.1]), 1e-3, 0.9, 0.999, 1e-8)
    assert out[0] == pytest.approx(1.0 - 0.001 * 0.1 / (0.1 + 1e-8), abs=1e-15)
    assert out[0] == pytest.approx(0.9990000001, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 1e3), st.sampled_from([-1.0, 1.0]))
def test_adam_first_step_is_sign_step(mag, sign):
    _, out = adam_step(AdamState.zeros(1), np.zeros(1), np.array([sign * mag]), 1e-3, 0.9, 0.999, 1e-8)
    assert out[0] == pytest.approx(-1e-3 * sign, rel=1e-4)


def test_adam_second_step_by_hand():
    b1, b2, lr, eps = 0.9, 0.999, 0.01, 1e-8
    s, th = adam_step(AdamState.zeros(1), np.array([0.5]), np.array([0.2]), lr, b1, b2, eps)
    s, th = adam_step(s, th, np.array([-0.4]), lr, b1, b2, eps)
    m = b1 * (0.1 * 0.2) + 0.1 * -0.4
    v = b2 * (0.001 * 0.04) + 0.001 * 0.16
    expected = 0.5 - lr * 0.2 / (0.2 + eps) - lr * (m / (1 - b1**2)) / (np.sqrt(v / (1 - b2**2)) + eps)
    assert th[0] == pytest.approx(expected, abs=1e-15)
    assert s.step == 2


@settings(max_examples=100, deadline=None)
@given(vec, vec)
def test_adam_without_moments_is_normalized_descent(theta, g):
    _, out = adam_step(AdamState.zeros(5), theta, g, 0.01, 0.0, 0.0, 1e-8)
    np.testing.assert_allclose(out, theta - 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12, atol=1e-12)


def test_adam_length_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(2), np.zeros(3), np.zeros(3), 1e-3, 0.9, 0.999, 1e-8)


def test_fedavg_examples():
    theta = np.array([2.0, -1.0])
    np.testing.assert_array_equal(fedavg_update(theta, np.zeros(2), 1.0), theta)
    local = np.array([1.25, 0.5])
    np.testing.assert_array_equal(fedavg_update(theta, theta - local, 1.0), local)
    assert fedavg_update(np.array([2.0]), np.array([0.5]), 1.0)[0] == 1.5
    with pytest.raises(ValueError):
        fedavg_update(np.zeros(2), np.zeros(3), 1.0)


def test_fedavgm_examples():
    state = FedAvgMomentumState(np.zeros(1))
    new_state, out = fedavgm_update(state, np.array([3.0]), np.array([1.0]), 1.0, 0.99)
    assert out[0] == pytest.approx(3.0 - 0.01, abs=1e-12)
    assert new_state.m[0] == pytest.approx(0.01, abs=1e-15)
    np.testing.assert_array_equal(state.m, 0.0)  # input state untouched
    _, out = fedavgm_update(state, np.array([3.0]), np.zeros(1), 1.0, 0.99)
    assert out[0] == 3.0


@settings(max_examples=100, deadline=None)
@given(vec, vec, vec, st.floats(0.01, 2.0))
def test_fedavgm_without_momentum_is_fedavg(theta, delta, m0, lr):
    _, out = fedavgm_update(FedAvgMomentumState(m0), theta, delta, lr, 0.0)
    np.testing.assert_array_equal(out, fedavg_update(theta, delta, lr))


def test_fedadam_scalar_by_hand():
    state = init_server_state("fedadam", 1, eps=1e-8)
    assert state.v[0] == 1e-8**2
    new, out = fedadam_update(state, np.array([0.0]), np.array([1.0]), 0.01, 0.99, 0.999, 1e-8)
    assert new.m[0] == pytest.approx(0.01, abs=1e-15)
    assert new.v[0] == pytest.approx(0.001, rel=1e-12)
    assert out[0] == pytest.approx(-0.01 * 0.01 / (np.sqrt(0.001 + 0.999e-16) + 1e-8), abs=1e-15)
    assert out[0] == pytest.approx(-0.0031623, abs=1e-7)


def test_fedadam_zero_delta():
    state = init_server_state("fedadam", 3)
    theta = np.array([1.0, 2.0, 3.0])
    new, out = fedadam_update(state, theta, np.zeros(3), 0.01, 0.99, 0.999, 1e-8)
    np.testing.assert_array_equal(out, theta)
    assert np.all(new.v > 0)


def test_fedadam_is_per_coordinate_adaptive():
    state = init_server_state("fedadam", 2)
    _, out = fedadam_update(state, np.zeros(2), np.array([1.0, 100.0]), 0.01, 0.99, 0.999, 1e-8)
    assert abs(out[0]) == pytest.approx(abs(out[1]), rel=1e-6)


@settings(max_examples=100, deadline=None)
@given(vec, vec, finite, st.sampled_from(["fedavg", "fedavgm", "fedadam"]))
def test_server_updates_are_translation_equivariant(theta, delta, c, algo):
    hp = HyperParams()
    state = init_server_state(algo, 5)
    _, a = server_update(algo, state, theta, delta, hp)
    _, b = server_update(algo, state, theta + c, delta, hp)
    np.testing.assert_allclose(b, a + c, rtol=1e-12, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(vec, min_size=1, max_size=10))
def test_server_states_stay_finite(deltas):
    hp = HyperParams()
    for algo in ("fedavgm", "fedadam"):
        state, theta = init_server_state(algo, 5), np.zeros(5)
        for d in deltas:
            state, theta = server_update(algo, state, theta, d, hp)
        assert np.all(np.isfinite(theta))
        if isinstance(state, FedAdamState):
            assert np.all(state.v > 0)


def test_hyperparam_defaults_and_validation():
    hp = HyperParams()
    assert (hp.server_epochs, hp.client_epochs, hp.client_lr, hp.batch_size) == (2000, 4, 1e-3, 64)
    assert hp.server_lr_for("fedadam") == 0.01
    assert hp.server_lr_for("fedavg") == hp.server_lr_for("fedavgm") == 1.0
    assert (hp.server_beta1, hp.server_beta2) == (0.99, 0.999)
    with pytest.raises(ValueError):
        HyperParams(client_beta1=1.0)
    with pytest.raises(ValueError):
        HyperParams(client_lr=0.0)
    with pytest.raises(ValueError):
        init_server_state("fedyogi", 3)
