"""Typed experiment config files: flat key-value text with strict sections.

The format is INI-style with one section per config dataclass
([experiment], [data], [local], [distill], [schedsim]); every key mirrors a
field name.  Unknown sections or keys are hard errors, since a silently
ignored typo can corrupt a whole sweep.  Configs round-trip: parsing the
canonical serialization yields an identical config and hash.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import DataConfig
from .distillation import DistillConfig
from .local_training import LocalConfig
from .orchestrators import ExperimentConfig
from .schedsim import AvailabilityTrace


class ConfigError(ValueError):
    """Malformed, unknown, or untypable configuration input."""


@dataclass(frozen=True)
class SchedSimConfig:
    """Inputs of the round-time scheduler comparison."""

    clients: int = 4
    rounds: int = 5
    num_models: int = 4
    train_cost: int | dict[int, int] = 1
    kd_cost: int = 1
    trace: str = "rotation"
    trace_file: str | None = None

    def __post_init__(self):
        if self.clients < 1 or self.rounds < 1 or self.num_models < 1:
            raise ValueError("clients, rounds and num_models must be >= 1")
        if self.trace not in ("rotation", "windows"):
            raise ValueError("trace must be 'rotation' or 'windows'")
        if self.trace == "windows" and not self.trace_file:
            raise ValueError("trace = windows requires trace_file")


@dataclass(frozen=True)
class FullConfig:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    schedsim: SchedSimConfig = field(default_factory=SchedSimConfig)


def _to_int(raw: str) -> int:
    return int(raw)


def _to_float(raw: str) -> float:
    return float(raw)


def _to_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _to_str(raw: str) -> str:
    return raw.strip()


def _to_int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.split(",") if part.strip())


def _to_cost(raw: str) -> int | dict[int, int]:
    parts = [p for p in raw.split(",") if p.strip()]
    if len(parts) == 1:
        return int(parts[0])
    return {i: int(p) for i, p in enumerate(parts)}


_EXPERIMENT_KEYS = {
    "method": _to_str, "rounds": _to_int, "num_models": _to_int,
    "ensemble_rounds": _to_int, "total_clients": _to_int,
    "participation": _to_float, "alpha": _to_float, "seed": _to_int,
    "shared_init": _to_bool, "warmup_rounds": _to_int,
    "ensemble_strategy": _to_str, "drop_worst": _to_bool,
    "early_stop": _to_bool, "hidden_sizes": _to_int_tuple,
    "activation": _to_str, "deterministic": _to_bool, "max_workers": _to_int,
}
_DATA_KEYS = {
    "classes": _to_int, "dim": _to_int, "separation": _to_float,
    "train_per_class": _to_int, "test_per_class": _to_int,
    "pool_per_class": _to_int, "server_val_fraction": _to_float,
}
_LOCAL_KEYS = {
    "epochs": _to_int, "batch_size": _to_int, "lr": _to_float,
    "prox_mu": _to_float, "trainer_kind": _to_str,
}
_DISTILL_KEYS = {
    "steps": _to_int, "batch_size": _to_int, "lr": _to_float,
    "temperature": _to_float,
}
_SCHEDSIM_KEYS = {
    "clients": _to_int, "rounds": _to_int, "num_models": _to_int,
    "train_cost": _to_cost, "kd_cost": _to_int, "trace": _to_str,
    "trace_file": _to_str,
}

_SCHEMA = {
    "experiment": _EXPERIMENT_KEYS,
    "data": _DATA_KEYS,
    "local": _LOCAL_KEYS,
    "distill": _DISTILL_KEYS,
    "schedsim": _SCHEDSIM_KEYS,
}


def _parse_section(parser: configparser.ConfigParser, section: str,
                   path: str) -> dict:
    out = {}
    if not parser.has_section(section):
        return out
    keys = _SCHEMA[section]
    for key, raw in parser.items(section):
        if key not in keys:
            raise ConfigError(f"{path}: unknown key '{key}' in [{section}]")
        try:
            out[key] = keys[key](raw)
        except ValueError as err:
            raise ConfigError(f"{path}: bad value for [{section}] {key}: {err}") from err
    return out


def load_config(path: str | Path) -> FullConfig:
    """Parse and validate a config file into typed dataclasses."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from err
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
    try:
        local = LocalConfig(**_parse_section(parser, "local", str(path)))
        distill = DistillConfig(**_parse_section(parser, "distill", str(path)))
        exp_kwargs = _parse_section(parser, "experiment", str(path))
        experiment = ExperimentConfig(local=local, distill=distill, **exp_kwargs)
        data = DataConfig(**_parse_section(parser, "data", str(path)))
        sched = SchedSimConfig(**_parse_section(parser, "schedsim", str(path)))
    except ValueError as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"{path}: {err}") from err
    return FullConfig(experiment=experiment, data=data, schedsim=sched)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, dict):
        return ",".join(str(value[k]) for k in sorted(value))
    return str(value)


def serialize_config(cfg: FullConfig) -> str:
    """Canonical text form: fixed section order, sorted keys."""
    exp = dataclasses.asdict(cfg.experiment)
    local = exp.pop("local")
    distill = exp.pop("distill")
    sections = [
        ("experiment", exp),
        ("data", dataclasses.asdict(cfg.data)),
        ("local", local),
        ("distill", distill),
        ("schedsim", {k: v for k, v in dataclasses.asdict(cfg.schedsim).items()
                      if v is not None}),
    ]
    lines = []
    for name, mapping in sections:
        lines.append(f"[{name}]")
        for key in sorted(mapping):
            lines.append(f"{key} = {_format_value(mapping[key])}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: FullConfig) -> str:
    """Content hash, independent of key order in the source file."""
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def parse_trace_file(path: str | Path) -> AvailabilityTrace:
    """Read per-client availability windows.

    One line per client: ``<client_id>: <start>-<end>[, <start>-<end> ...]``.
    Blank lines and '#' comments are skipped.  Client ids must be 0..n-1.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"trace file not found: {path}")
    windows: dict[int, list[tuple[int, int]]] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if ":" not in text:
            raise ConfigError(f"{path}:{lineno}: expected '<client>: <start>-<end>, ...'")
        head, _, rest = text.partition(":")
        try:
            client = int(head)
        except ValueError as err:
            raise ConfigError(f"{path}:{lineno}: bad client id {head!r}") from err
        if client in windows:
            raise ConfigError(f"{path}:{lineno}: duplicate client {client}")
        spans = []
        for part in rest.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" not in part:
                raise ConfigError(f"{path}:{lineno}: bad window {part!r}, expected start-end")
            a, _, b = part.partition("-")
            try:
                spans.append((int(a), int(b)))
            except ValueError as err:
                raise ConfigError(f"{path}:{lineno}: bad window bounds {part!r}") from err
        if not spans:
            raise ConfigError(f"{path}:{lineno}: client {client} has no windows")
        windows[client] = spans
    if not windows:
        raise ConfigError(f"{path}: empty trace file")
    ids = sorted(windows)
    if ids != list(range(len(ids))):
        raise ConfigError(f"{path}: client ids must be contiguous from 0, got {ids}")
    try:
        return AvailabilityTrace.from_windows([windows[i] for i in ids])
    except ValueError as err:
        raise ConfigError(f"{path}: {err}") from err
