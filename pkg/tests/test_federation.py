import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plfl.federation import (
    Channel, DivergenceError, aggregate, bandwidth_report, client_seed, client_update,
    make_clients, run_fl, run_nofl, run_plfl, sample_minibatch, train_local, write_history,
)
from plfl.data import build_dataset, synth_clients
from plfl.model import (
    LayerPartition, ModelConfig, init_params, loss_and_grad, merge_params, split_params,
)
from plfl.optim import AdamState, HyperParams, adam_step


def hp(**kw):
    base = dict(server_epochs=3, client_epochs=2, batch_size=8)
    base.update(kw)
    return HyperParams(**base)


def test_bandwidth_table():
    expected = {"FL": (84362, 2636), "P1": (11520, 360), "P2": (4800, 150), "P3": (0, 0)}
    for pid, (params, kb) in expected.items():
        r = bandwidth_report(pid)
        assert (r.parameters, r.kilobits) == (params, kb)
    assert bandwidth_report("P1").algorithm == "PL-FL Config. 1"


def test_aggregate_examples():
    assert aggregate([np.array([1.0]), np.array([2.0])], [16, 48])[0] == 1.75
    assert aggregate([np.array([1.0]), np.array([2.5])], [64, 64])[0] == 1.75
    assert aggregate([np.array([1.0]), np.array([3.0])], [3, 1])[0] == 1.5
    g = np.array([0.1, -0.2])
    np.testing.assert_array_equal(aggregate([g], [64]), g)
    with pytest.raises(ValueError):
        aggregate([np.zeros(2), np.zeros(3)], [1, 1])
    with pytest.raises(ValueError):
        aggregate([], [])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-100, 100)), st.integers(1, 100))
def test_aggregate_equal_weights_is_mean(grads, b):
    np.testing.assert_allclose(aggregate(list(grads), [b] * 4), grads.mean(axis=0), rtol=1e-12, atol=1e-12)


def test_sample_minibatch_falls_back_to_replacement():
    rng = np.random.default_rng(0)
    assert len(set(sample_minibatch(rng, 100, 64))) == 64
    assert len(sample_minibatch(rng, 5, 8)) == 8
    with pytest.raises(ValueError):
        sample_minibatch(rng, 0, 1)


def test_client_update_without_steps_sends_zero(small_config, small_datasets):
    p = init_params(small_config, 0)
    client = make_clients(small_datasets, 0)[0]
    r = client_update(p, client, hp(client_epochs=0), LayerPartition.from_id("FL"), small_config)
    np.testing.assert_array_equal(r.pseudo_gradient.flatten(), 0.0)
    assert np.isfinite(r.train_loss)


def test_client_update_full_model_length():
    config = ModelConfig()
    p = init_params(config, 0)
    ds = build_dataset(synth_clients(1, length=96 * 4, seed=0)[0], config.lookback)
    client = make_clients([ds], 0)[0]
    r = client_update(p, client, hp(client_epochs=1, batch_size=4), LayerPartition.from_id("FL"), config)
    assert r.pseudo_gradient.size == 42181
    assert r.personal.size == 0


def test_client_update_is_deterministic(small_config, small_datasets):
    p = init_params(small_config, 1)
    partition = LayerPartition.from_id("P1")
    shared, _ = split_params(p, partition)
    out = []
    for _ in range(2):
        client = make_clients(small_datasets, 3)[1]
        client.personal = split_params(p, partition)[1]
        out.append(client_update(shared, client, hp(), partition, small_config))
    assert out[0].pseudo_gradient.equal(out[1].pseudo_gradient)
    assert out[0].personal.equal(out[1].personal)


def test_zero_epochs_returns_initial_model(small_config, small_datasets):
    theta, history = run_fl(make_clients(small_datasets, 0), hp(server_epochs=0), "fedadam", 0, small_config)
    assert theta.equal(init_params(small_config, 0))
    assert history == []


@pytest.mark.parametrize("algo", ["fedavg", "fedadam"])
def test_divergence_is_reported(small_config, small_datasets, algo):
    bad = init_params(small_config, 0)
    bad["fc3.bias"][:] = np.nan
    with pytest.raises(DivergenceError, match="server epoch 1"):
        run_fl(make_clients(small_datasets, 0), hp(), algo, 0, small_config, init=bad)


def test_single_client_fedavg_collapses_to_local_training(small_config, small_datasets):
    ds = small_datasets[0]
    h = hp(server_epochs=5)
    theta, _ = run_fl(make_clients([ds], 4), h, "fedavg", 4, small_config)
    local = train_local(init_params(small_config, 4), ds, h,
                        np.random.default_rng(client_seed(4, ds.client_id)), small_config)
    assert theta.equal(local)


def test_single_client_personalization_matches_fl(small_config, small_datasets):
    ds = small_datasets[0]
    h = hp(server_epochs=4)
    theta, _ = run_fl(make_clients([ds], 2), h, "fedavg", 2, small_config)
    phi, psi, _ = run_plfl(make_clients([ds], 2), h, "fedavg", "P1", 2, small_config)
    assert merge_params(phi, psi[ds.client_id], small_config).equal(theta)


def test_fully_personalized_is_local_training(small_config, small_datasets):
    h = hp(server_epochs=4)
    phi, psi, _ = run_plfl(make_clients(small_datasets, 6), h, "fedadam", "P3", 6, small_config)
    assert phi.size == 0
    for ds in small_datasets:
        local = train_local(init_params(small_config, 6), ds, h,
                            np.random.default_rng(client_seed(6, ds.client_id)), small_config)
        assert psi[ds.client_id].equal(local)


def test_run_plfl_rejects_fl_partition(small_config, small_datasets):
    with pytest.raises(ValueError):
        run_plfl(make_clients(small_datasets, 0), hp(), "fedadam", "FL", 0, small_config)


@pytest.mark.parametrize("pid", ["P1", "P2"])
def test_personal_layers_never_leave_clients(small_config, small_datasets, pid):
    partition = LayerPartition.from_id(pid)
    channel = Channel(keep_payloads=True)
    h = hp(server_epochs=3)
    _, _, history = run_plfl(make_clients(small_datasets, 0), h, "fedadam", pid, 0, small_config, channel=channel)
    names = init_params(small_config, 0).names
    personal = set(partition.personalized_names(names))
    shared = set(partition.shared_names(names))
    assert channel.messages
    for m in channel.messages:
        assert personal.isdisjoint(m.names)
        assert set(m.names) == shared
    per_round = 2 * split_params(init_params(small_config, 0), partition)[0].size
    for ds in small_datasets:
        assert channel.values_between(ds.client_id) == h.server_epochs * per_round
    assert sum(history[0].params_sent.values()) == len(small_datasets) * per_round // 2


def test_worker_count_does_not_change_results(small_config, small_datasets):
    runs = [run_plfl(make_clients(small_datasets, 9), hp(), "fedadam", "P1", 9, small_config, workers=w)
            for w in (1, 4)]
    assert runs[0][0].equal(runs[1][0])
    for cid in runs[0][1]:
        assert runs[0][1][cid].equal(runs[1][1][cid])


def test_training_reduces_loss(small_config, small_datasets):
    h = hp(server_epochs=200, client_epochs=4)
    _, history = run_fl(make_clients(small_datasets, 0), h, "fedadam", 0, small_config)
    first = np.mean([np.mean(list(r.train_loss.values())) for r in history[:10]])
    last = np.mean([np.mean(list(r.train_loss.values())) for r in history[-10:]])
    assert last < first


def test_history_jsonl(tmp_path, small_config, small_datasets):
    _, history = run_fl(make_clients(small_datasets, 0), hp(server_epochs=2), "fedavgm", 0, small_config)
    write_history(tmp_path / "h.jsonl", history)
    rows = [json.loads(line) for line in (tmp_path / "h.jsonl").read_text().splitlines()]
    assert len(rows) == 2 * len(small_datasets)
    assert rows[0]["epoch"] == 1 and rows[0]["client_id"] == small_datasets[0].client_id
    assert rows[0]["params_sent"] == init_params(small_config, 0).size


def test_nofl_matches_hand_loop(small_config, small_datasets):
    h = hp()
    params = run_nofl(small_datasets, h, seed=5, config=small_config, epochs=6)
    X = np.concatenate([ds.train.X for ds in small_datasets])
    y = np.concatenate([ds.train.y for ds in small_datasets])
    rng = np.random.default_rng(np.random.SeedSequence(5, spawn_key=(2,)))
    p = init_params(small_config, 5)
    theta, state = p.flatten(), AdamState.zeros(p.size)
    for _ in range(6):
        idx = rng.choice(len(y), size=h.batch_size, replace=False)
        _, g = loss_and_grad(p.unflatten(theta), X[idx], y[idx], small_config)
        state, theta = adam_step(state, theta, g.flatten(), h.nofl_lr, 0.9, 0.999, 1e-8)
    assert params.equal(p.unflatten(theta))
    with pytest.raises(ValueError):
        run_nofl([], h)
