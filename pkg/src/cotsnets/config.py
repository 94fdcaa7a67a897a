"""YAML run configuration: training settings, source/target datasets, output directory."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .models import ModelConfig
from .trainer import Ablation, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    root: str
    split: str = "train"
    resize_to: tuple | None = None
    augmentation: bool = True
    seed: int = 0


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    source: DataSection | None = None
    target: DataSection | None = None
    eval: DataSection | None = None
    output_dir: str = "runs/default"


_NESTED = {"model": ModelConfig, "ablation": Ablation}


def _strict(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    out = dict(data)
    for key, sub in _NESTED.items():
        if key in out and key in names and isinstance(out[key], dict):
            out[key] = _strict(sub, out[key], f"{where}.{key}")
    try:
        return cls(**out)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def _data_section(d, where, base: Path):
    if d is None:
        return None
    sec = _strict(DataSection, d, where)
    root = Path(sec.root).expanduser()
    sec.root = str(root if root.is_absolute() else (base / root).resolve())
    return sec


def parse_run_config(data: dict, base_dir) -> RunConfig:
    base = Path(base_dir)
    data = data or {}
    unknown = sorted(set(data) - {f.name for f in dataclasses.fields(RunConfig)})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    train = _strict(TrainConfig, data.get("train", {}) or {}, "train")
    try:
        train.validate()
    except ValueError as e:
        raise ConfigError(f"train: {e}") from None
    out = Path(str(data.get("output_dir", "runs/default"))).expanduser()
    return RunConfig(
        train=train,
        source=_data_section(data.get("source"), "source", base),
        target=_data_section(data.get("target"), "target", base),
        eval=_data_section(data.get("eval"), "eval", base),
        output_dir=str(out if out.is_absolute() else (base / out).resolve()),
    )


def apply_override(data: dict, item: str) -> dict:
    """Apply ``KEY=VALUE``; a bare key addresses ``train``. VALUE is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) == 1 and parts[0] not in {f.name for f in dataclasses.fields(RunConfig)}:
        parts = ["train"] + parts
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {p} is not a mapping")
    node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_run_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from None
    for item in overrides:
        apply_override(data, item)
    return parse_run_config(data, path.parent.resolve())


def _type_name(tp) -> str:
    origin = typing.get_origin(tp)
    if origin is typing.Union or str(tp).startswith("Optional") or " | " in str(tp):
        return str(tp)
    return getattr(tp, "__name__", str(tp))


def _describe(cls) -> dict:
    hints = typing.get_type_hints(cls)
    out = {}
    for f in dataclasses.fields(cls):
        tp = hints.get(f.name, f.type)
        if tp in (ModelConfig, Ablation):
            out[f.name] = _describe(tp)
            continue
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        else:
            default = "<required>"
        if isinstance(default, tuple):
            default = list(default)
        out[f.name] = {"type": _type_name(tp), "default": default}
    return out


def schema() -> dict:
    return {
        "train": _describe(TrainConfig),
        "source": _describe(DataSection),
        "target": _describe(DataSection),
        "eval": _describe(DataSection) | {"_optional": True},
        "output_dir": {"type": "str", "default": "runs/default"},
    }


def schema_text() -> str:
    return json.dumps(schema(), indent=2, default=str)
