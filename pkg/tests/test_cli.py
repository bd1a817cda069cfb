import csv
import json

import numpy as np
import pytest
import yaml

from plfl.cli import main
from plfl.config import ConfigError, RunConfig, apply_overrides, from_dict, load_config
from plfl.data import build_dataset, synth_clients
from plfl.federation import client_seed, train_local
from plfl.model import ModelConfig, init_params, load_params

SMALL = [
    "--set", "model.lookback=4", "--set", "model.hidden=[5, 5]", "--set", "model.fc_sizes=[20, 10, 5, 1]",
    "--set", "data.length=384", "--set", "data.n_clients=3",
    "--set", "hyperparams.server_epochs=3", "--set", "hyperparams.batch_size=8",
]


def run(tmp_path, *args):
    return main(["--set", f"run.output_dir={tmp_path / 'out'}", *SMALL, *args])


def test_defaults_match_published_settings():
    cfg = RunConfig()
    hp = cfg.hyperparams
    assert (hp.server_epochs, hp.client_epochs, hp.client_lr, hp.batch_size) == (2000, 4, 1e-3, 64)
    assert (hp.server_lr_for("fedadam"), hp.server_beta1, hp.server_beta2) == (0.01, 0.99, 0.999)
    assert cfg.model == ModelConfig()


def test_config_roundtrip(tmp_path):
    cfg = load_config(None, ["run.partition=P2", "model.hidden=[20, 20]", "hyperparams.server_lr=0.5"])
    cfg.dump(tmp_path / "c.yaml")
    again = load_config(tmp_path / "c.yaml")
    assert again == cfg
    assert yaml.safe_load((tmp_path / "c.yaml").read_text()) == cfg.to_dict()


def test_config_errors_name_the_field():
    with pytest.raises(ConfigError, match=r"model\.depth"):
        from_dict({"model": {"depth": 3}})
    with pytest.raises(ConfigError, match="partition"):
        load_config(None, ["run.algorithm=plfl", "run.partition=FL"])
    with pytest.raises(ConfigError, match="hyperparams"):
        load_config(None, ["hyperparams.client_lr=-1"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no_dot=1"])
    with pytest.raises(ConfigError, match="unknown section"):
        from_dict({"optimizer": {}})


def test_nofl_ignores_partition():
    cfg = load_config(None, ["run.algorithm=nofl", "run.partition=P2"])
    assert cfg.effective_partition == "FL"


def test_output_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("PLFL_OUTPUT_ROOT", str(tmp_path))
    assert RunConfig().output_dir() == tmp_path / "plfl-P1-fedadam-seed0"


def test_generate_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main([*SMALL, "generate", "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["client_000.csv", "client_000.json", "client_001.csv", "client_001.json",
                     "client_002.csv", "client_002.json"]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert main(["--set", "data.n_clients=0", "generate", "--out", str(tmp_path / "c")]) == 2


def test_analyze_table(tmp_path):
    out = tmp_path / "corr.csv"
    assert main(["--set", "data.n_clients=6", "--set", "data.length=1344", "analyze", "--out", str(out)]) == 0
    rows = {r["feature"]: r for r in csv.DictReader(out.open())}
    assert float(rows["floor_space"]["correlation"]) > 0.95
    assert main(["--set", "data.n_clients=1", "--set", "data.length=384", "analyze", "--out", str(out)]) == 0
    rows = {r["feature"]: r for r in csv.DictReader(out.open())}
    assert rows["floor_space"]["flagged"]


def test_train_evaluate_plfl(tmp_path):
    assert run(tmp_path, "train") == 0
    out = tmp_path / "out"
    # both stacks are shared: 4 gates x (5x8 + 5x5 + 5 + 5) and 4 x (5x5 + 5x5 + 5 + 5), sent and received
    assert json.loads((out / "bandwidth.json").read_text())["parameters"] == 2 * (4 * 75 + 4 * 60)
    assert len((out / "history.jsonl").read_text().splitlines()) == 3 * 3
    assert sorted(p.name for p in out.glob("personal_*.ckpt")) == [f"personal_{i:03d}.ckpt" for i in range(3)]
    first = (out / "shared.ckpt").read_bytes()

    assert run(tmp_path, "evaluate") == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_clients"] == 3 and np.isfinite(summary["mean_mase"])
    assert len(list((out / "forecasts").glob("*.csv"))) == 3

    assert run(tmp_path, "train") == 0
    assert (out / "shared.ckpt").read_bytes() == first

    assert run(tmp_path, "--set", "run.partition=P2", "evaluate") == 2
    (out / "personal_001.ckpt").unlink()
    assert run(tmp_path, "evaluate") == 3


def test_default_model_p1_bandwidth(tmp_path):
    args = ["--set", f"run.output_dir={tmp_path}", "--set", "data.length=384", "--set", "data.n_clients=2",
            "--set", "hyperparams.server_epochs=1", "train"]
    assert main(args) == 0
    assert json.loads((tmp_path / "bandwidth.json").read_text()) == {
        "algorithm": "PL-FL Config. 1", "parameters": 11520, "kilobits": 360}


def test_single_client_fl_matches_local_training(tmp_path):
    assert run(tmp_path, "--set", "data.n_clients=1", "--set", "run.algorithm=fl",
               "--set", "run.server_algo=fedavg", "--set", "hyperparams.server_lr=1.0", "train") == 0
    theta, meta = load_params(tmp_path / "out" / "shared.ckpt")
    cfg = load_config(None, [a for a in SMALL if a != "--set"])
    ds = build_dataset(synth_clients(1, length=384, seed=0)[0], cfg.model.lookback)
    local = train_local(init_params(cfg.model, 0), ds, cfg.hyperparams,
                        np.random.default_rng(client_seed(0, 0)), cfg.model)
    assert theta.equal(local)
    assert meta["partition"] == "FL"


def test_nofl_train_and_evaluate(tmp_path):
    assert run(tmp_path, "--set", "run.algorithm=nofl", "--set", "hyperparams.nofl_epochs=5", "train") == 0
    assert run(tmp_path, "--set", "run.algorithm=nofl", "evaluate") == 0
    assert json.loads((tmp_path / "out" / "bandwidth.json").read_text())["parameters"] == 0


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning", "ignore:invalid value:RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    assert run(tmp_path, "--set", "hyperparams.client_lr=1e300", "--set", "run.algorithm=fl", "train") == 4


def test_missing_data_directory(tmp_path):
    assert run(tmp_path, "--set", "data.source=directory", "--set", f"data.path={tmp_path / 'none'}", "train") == 3
