"""Experiment configuration: strict TOML parsing into :class:`FederationConfig`.

Unknown keys, wrong types, and out-of-range values are all rejected before
anything runs. Errors carry the dotted field name and, when it can be found,
the line in the TOML source.
"""
from __future__ import annotations

import dataclasses
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from dpfed.errors import ConfigError
from dpfed.seeding import MAX_SEED

DATA_SOURCES = ("blobs", "csv", "gray8")
PARTITION_MODES = ("iid", "label_skew")
POLICIES = ("clipped", "paper_faithful")
AGGREGATIONS = ("uniform_mean", "sample_weighted")
PROGRESS_SOURCES = ("validation_split", "client_weighted_train_loss")


def _positive(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit_open(x):
    return 0 < x < 1


def _fraction(x):
    return 0 <= x < 1


def _seed(x):
    return 0 <= x <= MAX_SEED


def _opt(kind, check=None, choices=None, desc=""):
    return {"kind": kind, "check": check, "choices": choices, "desc": desc}


@dataclass(frozen=True)
class DataConfig:
    source: str = field(default="blobs", metadata=_opt(str, choices=DATA_SOURCES))
    classes: int = field(default=2, metadata=_opt(int, _positive, desc="positive"))
    samples_per_class: int = field(default=150, metadata=_opt(int, _positive, desc="positive"))
    feature_dim: int = field(default=2, metadata=_opt(int, _positive, desc="positive"))
    spread: float = field(default=1.0, metadata=_opt(float, _positive, desc="positive"))
    seed: int | None = field(default=None, metadata=_opt(int, _seed, desc="in [0, 2**64)"))
    path: str | None = field(default=None, metadata=_opt(str))
    label_column: Any = field(default="label", metadata=_opt((str, int)))
    labels_path: str | None = field(default=None, metadata=_opt(str))
    equalize: bool = field(default=True, metadata=_opt(bool))
    normalize: bool = field(default=True, metadata=_opt(bool))
    test_fraction: float = field(default=0.2, metadata=_opt(float, _fraction, desc="in [0, 1)"))


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = field(default=(16, 16), metadata=_opt("int_list"))


@dataclass(frozen=True)
class PartitionConfig:
    mode: str = field(default="iid", metadata=_opt(str, choices=PARTITION_MODES))
    clients: int = field(default=3, metadata=_opt(int, _positive, desc="positive"))
    concentration: float = field(default=0.5, metadata=_opt(float, _positive, desc="positive"))


@dataclass(frozen=True)
class PrivacyConfig:
    enabled: bool = field(default=True, metadata=_opt(bool))
    epsilon: float = field(default=1.0, metadata=_opt(float, _positive, desc="positive"))
    delta: float = field(default=1e-5, metadata=_opt(float, _unit_open, desc="in (0, 1)"))
    policy: str = field(default="clipped", metadata=_opt(str, choices=POLICIES))
    clip_norm: float = field(default=1.0, metadata=_opt(float, _positive, desc="positive"))
    progress_floor: float = field(default=1e-6, metadata=_opt(float, _positive, desc="positive"))


@dataclass(frozen=True)
class TrainingConfig:
    rounds: int = field(default=36, metadata=_opt(int, _positive, desc="positive"))
    base_lr: float = field(default=0.1, metadata=_opt(float, _positive, desc="positive"))
    decay: float = field(default=0.0, metadata=_opt(float, _nonneg, desc="non-negative"))
    local_epochs: int = field(default=1, metadata=_opt(int, _positive, desc="positive"))
    batch_size: int = field(default=16, metadata=_opt(int, _positive, desc="positive"))
    aggregation: str = field(default="uniform_mean", metadata=_opt(str, choices=AGGREGATIONS))
    progress_source: str = field(default="validation_split", metadata=_opt(str, choices=PROGRESS_SOURCES))
    validation_fraction: float = field(default=0.1, metadata=_opt(float, _fraction, desc="in [0, 1)"))
    workers: int = field(default=1, metadata=_opt(int, _positive, desc="positive"))
    early_stop_threshold: float | None = field(default=None, metadata=_opt(float, _positive, desc="positive"))
    early_stop_patience: int = field(default=3, metadata=_opt(int, _positive, desc="positive"))


@dataclass(frozen=True)
class WarmStartConfig:
    epochs: int = field(default=0, metadata=_opt(int, _nonneg, desc="non-negative"))
    fraction: float = field(default=0.0, metadata=_opt(float, _fraction, desc="in [0, 1)"))


@dataclass(frozen=True)
class OutputConfig:
    trace: str = field(default="trace.jsonl", metadata=_opt(str))
    summary: str = field(default="summary.json", metadata=_opt(str))
    csv: str | None = field(default=None, metadata=_opt(str))
    record_wall_time: bool = field(default=False, metadata=_opt(bool))


@dataclass(frozen=True)
class FederationConfig:
    master_seed: int = field(metadata=_opt(int, _seed, desc="in [0, 2**64)"))
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    warm_start: WarmStartConfig = field(default_factory=WarmStartConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    base_dir: Path = field(default=Path("."), compare=False, metadata={"internal": True})

    def replace(self, **sections) -> "FederationConfig":
        """Copy with selected section fields overridden, e.g. ``replace(privacy={"epsilon": 10.0})``."""
        updates = {}
        for name, value in sections.items():
            current = getattr(self, name)
            if isinstance(value, Mapping) and dataclasses.is_dataclass(current):
                updates[name] = dataclasses.replace(current, **value)
            else:
                updates[name] = value
        cfg = dataclasses.replace(self, **updates)
        _cross_checks(cfg)
        return cfg

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _check_value(value, meta, name: str):
    kind = meta["kind"]
    if kind == "int_list":
        if not isinstance(value, list) or not value:
            raise ConfigError("expected a non-empty list of positive integers", name)
        for v in value:
            if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
                raise ConfigError(f"expected positive integers, got {v!r}", name)
        return tuple(value)
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {type(value).__name__}", name)
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError("must be finite", name)
    elif kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {type(value).__name__}", name)
    elif kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {type(value).__name__}", name)
    elif isinstance(kind, tuple):
        if isinstance(value, bool) or not isinstance(value, kind):
            raise ConfigError(f"expected a string or integer, got {type(value).__name__}", name)
    elif not isinstance(value, kind):
        raise ConfigError(f"expected {kind.__name__}, got {type(value).__name__}", name)
    if meta["choices"] is not None and value not in meta["choices"]:
        raise ConfigError(f"must be one of {', '.join(meta['choices'])}; got {value!r}", name)
    if meta["check"] is not None and not meta["check"](value):
        raise ConfigError(f"must be {meta['desc']}; got {value!r}", name)
    return value


def _build(cls, table: Mapping, prefix: str):
    if not isinstance(table, Mapping):
        raise ConfigError("expected a table", prefix.rstrip(".") or None)
    known = {f.name: f for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    for key in table:
        if key not in known:
            raise ConfigError("unknown key", f"{prefix}{key}")
    kwargs = {}
    for name, f in known.items():
        dotted = f"{prefix}{name}"
        if name not in table:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError("required key is missing", dotted)
            continue
        value = table[name]
        if dataclasses.is_dataclass(f.default_factory if f.default_factory is not dataclasses.MISSING else None):
            kwargs[name] = _build(f.default_factory, value, dotted + ".")
        else:
            kwargs[name] = _check_value(value, f.metadata, dotted)
    return cls(**kwargs)


def _cross_checks(cfg: FederationConfig) -> None:
    d, t = cfg.data, cfg.training
    if d.source in ("csv", "gray8") and not d.path:
        raise ConfigError(f"required when data.source = '{d.source}'", "data.path")
    if d.source == "gray8" and not d.labels_path:
        raise ConfigError("required when data.source = 'gray8'", "data.labels_path")
    if t.progress_source == "validation_split" and t.validation_fraction <= 0:
        raise ConfigError("must be positive when progress_source = 'validation_split'", "training.validation_fraction")
    if cfg.warm_start.epochs > 0 and cfg.warm_start.fraction <= 0:
        raise ConfigError("must be positive when warm_start.epochs > 0", "warm_start.fraction")


def _locate(text: str, dotted: str | None) -> int | None:
    """Best-effort line number of ``dotted`` in the TOML source."""
    if not dotted:
        return None
    *sections, key = dotted.split(".")
    lines = text.splitlines()
    section = ""
    for no, line in enumerate(lines, 1):
        stripped = line.strip()
        m = re.match(r"^\[([^\[\]]+)\]", stripped)
        if m:
            section = m.group(1).strip()
            if sections and section == ".".join(sections) and key == "":
                return no
            continue
        if section == ".".join(sections) and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return no
    for no, line in enumerate(lines, 1):
        if sections and line.strip() == f"[{'.'.join(sections)}]":
            return no
    return None


def parse_config(text: str, base_dir: str | Path = ".") -> FederationConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", line=int(m.group(1)) if m else None) from None
    try:
        cfg = _build(FederationConfig, raw, "")
        cfg = dataclasses.replace(cfg, base_dir=Path(base_dir))
        _cross_checks(cfg)
    except ConfigError as exc:
        if exc.line is None and exc.field:
            raise ConfigError(str(exc).split(": ", 1)[-1], exc.field, _locate(text, exc.field)) from None
        raise
    return cfg


def load_config(path: str | Path) -> FederationConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config(text, path.parent)
