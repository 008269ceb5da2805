import json
from pathlib import Path

import pytest

from moereg.config import (ExperimentConfig, apply_axis, config_from_dict,
                           default_config, load_config)
from moereg.errors import ConfigError

REPO = Path(__file__).resolve().parents[1]


def test_checked_in_defaults_match_code():
    on_disk = json.loads((REPO / "configs" / "defaults.json").read_text())
    assert on_disk == default_config().to_json()


def test_round_trip_through_dict():
    cfg = default_config()
    again = config_from_dict(cfg.to_json())
    assert again.to_json() == cfg.to_json()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"no_such_key": 1})
    with pytest.raises(ConfigError):
        config_from_dict({"model": {"bogus": 2}})


def test_validation_errors():
    with pytest.raises(ConfigError):
        config_from_dict({"model": {"routing": "sideways"}})
    with pytest.raises(ConfigError):
        config_from_dict({"model": {"k": 9}})
    with pytest.raises(ConfigError):
        config_from_dict({"model": {"routing": "prior", "coding": "none"}})
    with pytest.raises(ConfigError):
        config_from_dict({"scene": {"overlap": 0.0}})
    with pytest.raises(ConfigError):
        config_from_dict({"prior": {"tau_o": 1.0}})


def test_pair_seeds():
    cfg = ExperimentConfig(seed=10, num_pairs=3)
    assert cfg.pair_seeds() == [10, 11, 12]
    cfg = ExperimentConfig(seeds=(5, 9, 40))
    assert cfg.pair_seeds() == [5, 9, 40]


def test_apply_axis():
    cfg = default_config()
    assert apply_axis(cfg, "tau_o", 0.3).prior.tau_o == 0.3
    assert apply_axis(cfg, "routing", "dense").model.routing == "dense"
    coded = apply_axis(cfg, "coding", "binary")
    assert coded.model.coding == "binary" and coded.model.routing == "prior"
    uncoded = apply_axis(cfg, "coding", "none")
    assert uncoded.model.routing == "vanilla"
    with pytest.raises(ConfigError):
        apply_axis(cfg, "blocks", 2)


def test_load_config_bad_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)
