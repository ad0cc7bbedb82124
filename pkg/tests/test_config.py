import json

import pytest

from ugtst import config as config_mod
from ugtst.config import ConfigError, TrainConfig


def test_defaults_materialized():
    cfg = config_mod.resolve()
    assert set(cfg) == set(config_mod.DEFAULTS)
    assert all(cfg[f"{p}.seed"] is not None for p in ("aug", "select", "source", "stage1"))
    assert cfg["select.capacity_multiplier"] == 4 and cfg["unc.bins"] == 100


def test_seed_derivation():
    a, b = config_mod.resolve(seed=1), config_mod.resolve(seed=2)
    assert a == config_mod.resolve(seed=1)
    assert a["aug.seed"] != b["aug.seed"] and a["aug.seed"] != a["select.seed"]
    assert config_mod.resolve({"select.seed": 9}, seed=1)["select.seed"] == 9


def test_unknown_and_bad_values():
    with pytest.raises(ConfigError, match="capacity_multipler"):
        config_mod.resolve({"select.capacity_multipler": 4})
    with pytest.raises(ConfigError):
        config_mod.resolve({"select.capacity_multiplier": 2.5})
    with pytest.raises(ConfigError):
        config_mod.resolve({"eval.tta": "yes"})
    with pytest.raises(ConfigError):
        config_mod.resolve({"select.strategy": "nope"})
    with pytest.raises(ConfigError):
        config_mod.resolve({"stage1.epochs": 0})


def test_load(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"aug.k": 4}))
    assert config_mod.load(tmp_path / "c.json", seed=3)["aug.k"] == 4
    (tmp_path / "bad.json").write_text("[1]")
    with pytest.raises(ConfigError):
        config_mod.load(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        config_mod.load(tmp_path / "missing.json")


def test_train_config():
    tc = TrainConfig.from_config(config_mod.resolve(seed=0), "stage2")
    assert tc.lr0 == 0.001 and tc.estimator_params()["momentum"] == 0.9
