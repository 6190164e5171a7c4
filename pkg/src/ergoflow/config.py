"""Run configuration: a JSON file parsed into :class:`RunConfig` with field-path errors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .coeffs import DEFAULT_WINDOW
from .measures import DEFAULT_N_GRID


class ConfigError(ValueError):
    """Malformed configuration; the message starts with the offending field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class RunConfig:
    model: Any = "ou"
    dt: float = 1e-3
    window: float = DEFAULT_WINDOW
    n_grid: int = DEFAULT_N_GRID
    seed: int = 0
    escape_threshold: float | None = None
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _number(value, path: str, positive: bool = False, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {type(value).__name__}")
    if integer and not float(value).is_integer():
        raise ConfigError(path, "expected an integer")
    if positive and not value > 0:
        raise ConfigError(path, "must be positive")
    return int(value) if integer else float(value)


def _model(value, path: str):
    if isinstance(value, str):
        return value
    if not isinstance(value, dict):
        raise ConfigError(path, "expected a catalog name or an object")
    allowed = {"kind", "params", "sigma", "m"}
    for k in value:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}", "unknown field")
    if "kind" in value:
        if not isinstance(value["kind"], str):
            raise ConfigError(f"{path}.kind", "expected a string")
    elif "m" not in value or "sigma" not in value:
        raise ConfigError(path, "needs 'kind' or both 'sigma' and 'm' expressions")
    for k in ("sigma", "m"):
        if k in value and not isinstance(value[k], (str, int, float)):
            raise ConfigError(f"{path}.{k}", "expected an expression string or a number")
    params = value.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError(f"{path}.params", "expected an object")
    for k, v in params.items():
        _number(v, f"{path}.params.{k}")
    return value


def parse_config(data: dict, where: str = "config") -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(where, "expected a JSON object")
    known = {f.name for f in fields(RunConfig)}
    for k in data:
        if k not in known:
            raise ConfigError(f"{where}.{k}", "unknown field")
    cfg = RunConfig()
    if "model" in data:
        cfg.model = _model(data["model"], f"{where}.model")
    if "dt" in data:
        cfg.dt = _number(data["dt"], f"{where}.dt", positive=True)
    if "window" in data:
        cfg.window = _number(data["window"], f"{where}.window", positive=True)
    if "n_grid" in data:
        cfg.n_grid = _number(data["n_grid"], f"{where}.n_grid", positive=True, integer=True)
        if cfg.n_grid % 4:
            raise ConfigError(f"{where}.n_grid", "must be a multiple of 4")
    if "seed" in data:
        cfg.seed = _number(data["seed"], f"{where}.seed", integer=True)
    if data.get("escape_threshold") is not None:
        cfg.escape_threshold = _number(data["escape_threshold"], f"{where}.escape_threshold", positive=True)
    if "params" in data:
        if not isinstance(data["params"], dict):
            raise ConfigError(f"{where}.params", "expected an object")
        cfg.params = dict(data["params"])
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
    return parse_config(data)


def get_param(cfg: RunConfig, name: str, default, kind: str = "number"):
    """Typed lookup in ``cfg.params`` with a ``config.params.<name>`` error path."""
    if name not in cfg.params or cfg.params[name] is None:
        return default
    value = cfg.params[name]
    path = f"config.params.{name}"
    if kind == "number":
        return _number(value, path)
    if kind == "int":
        return _number(value, path, integer=True)
    if kind == "list":
        if not isinstance(value, list) or not value:
            raise ConfigError(path, "expected a non-empty list of numbers")
        return [_number(v, f"{path}[{i}]") for i, v in enumerate(value)]
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true or false")
        return value
    raise ValueError(kind)
