import json

import pytest

from gpmpc.config import AUV_DEFAULTS, ConfigError, dump_config, load_config, parse_override


def test_defaults_filled(tmp_path):
    p = tmp_path / "auv.json"
    p.write_text(json.dumps({"scenario": "auv"}))
    cfg = load_config(str(p))
    assert cfg == AUV_DEFAULTS
    assert cfg["mpc"]["N"] == 35 and cfg["constraints"]["violation_prob"] == 0.0228


def test_override_horizon():
    assert load_config(scenario="auv", overrides=["mpc.N=10"])["mpc"]["N"] == 10


def test_negative_length_scale_names_key():
    with pytest.raises(ConfigError, match="gp.length_scales"):
        load_config(scenario="auv", overrides=["gp.length_scales=[[-0.3,0.1],[0.3,0.1]]"])


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="mpc.horizon"):
        load_config(scenario="auv", overrides=["mpc.horizon=3"])


def test_type_error_names_expected_type():
    with pytest.raises(ConfigError, match="mpc.N: expected number"):
        load_config(scenario="race", overrides=["mpc.N=ten"])


def test_scenario_mismatch(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"scenario": "race"}))
    with pytest.raises(ConfigError):
        load_config(str(p), scenario="auv")


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(str(p))


def test_parse_override_values():
    assert parse_override("a.b=1.5") == (["a", "b"], 1.5)
    assert parse_override("mpc.method=taylor") == (["mpc", "method"], "taylor")
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_round_trip(tmp_path):
    cfg = load_config(scenario="race", overrides=["mpc.q_lag=150", "nominal.scale={\"Df\":1.1}"])
    p = tmp_path / "cfg.json"
    dump_config(cfg, str(p))
    assert load_config(str(p)) == cfg


def test_tighten_steps_bounded_by_horizon():
    with pytest.raises(ConfigError):
        load_config(scenario="race", overrides=["mpc.N=10"])
