import json

import pytest

from ergoflow.config import ConfigError, RunConfig, get_param, load_config, parse_config


def test_defaults():
    cfg = load_config(None)
    assert cfg == RunConfig()
    assert cfg.to_dict()["n_grid"] == 16384


def test_round_trip(tmp_path):
    data = {"model": {"kind": "double_well"}, "dt": 0.002, "seed": 9, "params": {"x0": [0.5]}}
    p = tmp_path / "c.json"
    p.write_text(json.dumps(data))
    cfg = load_config(p)
    assert parse_config(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/cfg.json")


def test_bool_is_not_a_number():
    with pytest.raises(ConfigError) as info:
        parse_config({"seed": True})
    assert info.value.path == "config.seed"


@pytest.mark.parametrize(
    "kind, value, expected",
    [("number", 2, 2.0), ("int", 3.0, 3), ("list", [1, 2], [1.0, 2.0]), ("str", "x", "x"), ("bool", True, True)],
)
def test_get_param_types(kind, value, expected):
    assert get_param(RunConfig(params={"p": value}), "p", None, kind) == expected


@pytest.mark.parametrize("kind, value", [("int", 2.5), ("list", []), ("list", [1, "a"]), ("str", 1), ("bool", 1)])
def test_get_param_errors(kind, value):
    with pytest.raises(ConfigError) as info:
        get_param(RunConfig(params={"p": value}), "p", None, kind)
    assert info.value.path.startswith("config.params.p")


def test_get_param_default():
    assert get_param(RunConfig(), "missing", 7) == 7
