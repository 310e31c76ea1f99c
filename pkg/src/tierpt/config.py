"""Run configuration: nested dataclasses loaded from and dumped to YAML."""

from __future__ import annotations

import dataclasses
import enum
import re
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .migration import AutoNumaConfig
from .mmu import MmuConfig
from .topology import DataPolicy, PtPolicy, TopologyConfig
from .workloads import ScenarioConfig


@dataclass
class PteMigrationConfig:
    enabled: bool = True
    # re-run trylock/no-memory skips once the run is quiescent
    retry_skipped: bool = False


@dataclass
class DemotionConfig:
    enabled: bool = False


@dataclass
class ReclaimConfig:
    enabled: bool = True
    batch: int = 64


@dataclass
class PolicyConfig:
    data_policy: DataPolicy = DataPolicy.FIRST_TOUCH
    pt_policy: PtPolicy = PtPolicy.FOLLOW_DATA
    autonuma: AutoNumaConfig = field(default_factory=AutoNumaConfig)
    pte_migration: PteMigrationConfig = field(default_factory=PteMigrationConfig)
    thp: bool = False
    demotion: DemotionConfig = field(default_factory=DemotionConfig)
    reclaim: ReclaimConfig = field(default_factory=ReclaimConfig)


@dataclass
class EngineConfig:
    cpi_base: int = 1
    walk_window: int = 1000


@dataclass
class SimConfig:
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    mmu: MmuConfig = field(default_factory=MmuConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)


@dataclass
class RunConfig(SimConfig):
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    seed: int = 0
    output_dir: str = "out"


_SIZE_SUFFIXES = ("_bytes", "_stride")
_UNITS = {"": 1, "b": 1, "k": 1 << 10, "kb": 1 << 10, "kib": 1 << 10, "m": 1 << 20, "mb": 1 << 20,
          "mib": 1 << 20, "g": 1 << 30, "gb": 1 << 30, "gib": 1 << 30, "t": 1 << 40, "tb": 1 << 40,
          "tib": 1 << 40}


def parse_size(value) -> int:
    """``"512MiB"`` -> bytes; plain integers pass through."""
    if isinstance(value, bool):
        raise ConfigError(f"not a size: {value!r}")
    if isinstance(value, int):
        return value
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*([a-zA-Z]*)\s*", str(value))
    if not m or m.group(2).lower() not in _UNITS:
        raise ConfigError(f"not a size: {value!r}")
    return int(float(m.group(1)) * _UNITS[m.group(2).lower()])


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(args[0], value, where)
    if origin is list:
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_convert(inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError:
            choices = [m.value for m in tp]
            raise ConfigError(f"{where}: {value!r} is not one of {choices}") from None
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if where.endswith(_SIZE_SUFFIXES):
            return parse_size(value)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        return str(value)
    return value


def from_dict(cls, data, where: str = "config"):
    """Build dataclass ``cls`` from nested dicts, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, list):
        return [to_dict(v) for v in obj]
    return obj


def load_config(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(RunConfig, data or {})


def dump_config(cfg) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
