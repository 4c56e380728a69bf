import logging

import pytest
import yaml

from spy_watermark.config import ExperimentConfig, profile_defaults, validate_config
from spy_watermark.errors import ConfigError


def test_ratio_out_of_range_reported_with_path():
    with pytest.raises(ConfigError) as err:
        validate_config({"poison": {"ratio": 1.5}})
    assert ("poison.ratio", "ratio out of [0,1]") in err.value.problems
    assert "ratio out of [0,1]" in str(err.value)


def test_empty_file_gives_desk_defaults(tmp_path, caplog):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    with caplog.at_level(logging.INFO):
        cfg = validate_config(path)
    assert cfg.profile == "desk"
    assert cfg.to_dict() == {**profile_defaults("desk"), "output_dir": "runs/desk"}
    assert "applied desk-profile defaults" in caplog.text and "loss.lambda1" in caplog.text


def test_lambda_defaults():
    cfg = validate_config({"loss": {"epsilon": 0.01}})
    assert (cfg.loss.lambda1, cfg.loss.lambda2, cfg.loss.epsilon) == (1.0, 0.1, 0.01)


def test_problems_are_aggregated():
    raw = {"poison": {"ratio": -0.1, "target_label": 99}, "victim": {"epochs": 0}, "bogus": 1,
           "injector": {"depth": 3}}
    with pytest.raises(ConfigError) as err:
        validate_config(raw)
    paths = {p for p, _ in err.value.problems}
    assert {"poison.ratio", "poison.target_label", "victim.epochs", "bogus", "injector.depth"} <= paths


def test_full_scale_profile_values():
    cfg = validate_config({}, profile="paper")
    assert (cfg.injector.encoder_depth, cfg.injector.decoder_depth) == (24, 8)
    assert (cfg.victim.architecture, cfg.victim.epochs, cfg.victim.lr, cfg.victim.momentum) == ("resnet18", 100, 0.1, 0.9)
    assert (cfg.schedule.iterations, cfg.schedule.lr, cfg.schedule.momentum) == (10_000, 2e-4, 0.5)
    assert cfg.poison.ratio == 0.1 and cfg.defense.tau == 2.0


def test_dump_round_trips_and_hash_is_stable(tmp_path):
    cfg = validate_config({"seed": 5, "poison": {"ratio": 0.2}})
    cfg.dump(tmp_path / "c.yaml")
    again = validate_config(tmp_path / "c.yaml")
    assert again.to_dict() == cfg.to_dict()
    assert again.config_hash() == cfg.config_hash()
    assert validate_config({"seed": 6}).config_hash() != cfg.config_hash()


def test_seed_flag_overrides_and_derives_sub_seeds():
    cfg = validate_config({"seed": 1}, seed=9)
    assert cfg.seed == 9 and cfg.schedule.seed == 9 and cfg.victim.seed == 11
    assert isinstance(cfg, ExperimentConfig)


def test_unparseable_file(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("a: [unclosed")
    with pytest.raises(ConfigError):
        validate_config(path)
    assert yaml.safe_load("{}") == {}
