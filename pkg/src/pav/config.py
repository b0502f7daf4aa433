"""Run configuration: one JSON document covering every module's settings."""
from __future__ import annotations

import dataclasses
import json
import typing
from pathlib import Path

from .errors import ConfigError
from .field import FieldConfig
from .training.loop import TrainConfig
from .training.synthetic import SceneConfig


@dataclasses.dataclass(frozen=True)
class RenderSettings:
    samples: int = 64
    chunk: int = 4096


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scene: SceneConfig = dataclasses.field(default_factory=SceneConfig)
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    render: RenderSettings = dataclasses.field(default_factory=RenderSettings)


def build(cls, data: dict, where: str = "config"):
    """Construct dataclass ``cls`` from ``data``, recursing into nested dataclasses; unknown keys fail."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - fields)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            value = build(hint, value, f"{where}.{name}")
        elif typing.get_origin(hint) is tuple:
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (a nested dict)."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as err:
            raise ConfigError(f"config file {path} not found") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: {err}") from err
    return build(RunConfig, _merge(data, overrides or {}))


def config_to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def write_run_config(cfg: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_config.json"
    path.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
    return path
