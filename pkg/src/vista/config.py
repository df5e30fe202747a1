"""TOML run configuration with schema validation and environment overrides.

Sections map onto dataclasses: ``[model]`` -> :class:`ModelConfig`,
``[data]`` -> :class:`DataSection` (its ``synthetic`` sub-table ->
:class:`SyntheticConfig`), ``[train]`` -> :class:`TrainConfig`,
``[output]`` -> :class:`OutputSection`. Any key can be overridden with an
environment variable ``VISTA_<SECTION>__<KEY>``, e.g. ``VISTA_MODEL__K=16``;
values are parsed as TOML scalars.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import SyntheticConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

ENV_PREFIX = "VISTA_"


@dataclass
class DataSection:
    source: str = "synthetic"  # "synthetic" or "csv"
    path: str = ""
    train_fraction: float = 0.8
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class OutputSection:
    checkpoint: str = "vista.vstm"
    curve: str = ""  # default: checkpoint path with suffix .curve.csv
    report: str = ""
    export_log: str = ""  # on-disk export log; empty disables periodic export
    export_every: int = 0  # publish held-out users' summaries every N steps
    export_users: int = 100


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputSection = field(default_factory=OutputSection)


def _type_ok(value, annotation):
    kind = str(annotation)
    if "bool" in kind:
        return isinstance(value, bool)
    if "int" in kind and "float" not in kind:
        return isinstance(value, int) and not isinstance(value, bool)
    if "float" in kind:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if "str" in kind:
        return isinstance(value, str)
    if "tuple" in kind:
        return isinstance(value, (list, tuple)) and all(isinstance(v, int) for v in value)
    return True


def _build(cls, table, path):
    if not isinstance(table, dict):
        raise ConfigError(f"{path}: expected a table")
    kwargs = {}
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in table.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"{where}: unknown key")
        f = known[key]
        if dataclasses.is_dataclass(f.default_factory if f.default_factory is not dataclasses.MISSING else None):
            kwargs[key] = _build(f.default_factory, value, where)
            continue
        if not _type_ok(value, f.type):
            raise ConfigError(f"{where}: expected {f.type}, got {type(value).__name__} {value!r}")
        kwargs[key] = value
    return cls(**kwargs)


def _env_overrides(environ):
    table = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX):].split("__")]
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw  # bare strings
        node = table
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return table


def _merge(base, extra):
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def parse_config(table: dict, environ=None) -> RunConfig:
    table = _merge(dict(table), _env_overrides(os.environ if environ is None else environ))
    cfg = _build(RunConfig, table, "")
    try:
        cfg.model.validate()
        cfg.data.synthetic.validate()
    except ConfigError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    if cfg.data.source not in ("synthetic", "csv"):
        raise ConfigError("data.source: must be 'synthetic' or 'csv'")
    if cfg.data.source == "csv" and not cfg.data.path:
        raise ConfigError("data.path: required when data.source = 'csv'")
    if not 0 < cfg.data.train_fraction < 1:
        raise ConfigError("data.train_fraction: must be in (0, 1)")
    if cfg.train.epochs < 0 or cfg.train.batch_users < 1 or cfg.train.lr <= 0:
        raise ConfigError("train: need epochs >= 0, batch_users >= 1 and lr > 0")
    if cfg.output.export_every < 0 or cfg.output.export_users < 0:
        raise ConfigError("output: export_every and export_users must be >= 0")
    return cfg


def load_config(path, environ=None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        table = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(table, environ)
