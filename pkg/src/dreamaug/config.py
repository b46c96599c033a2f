"""Strict JSON configuration for the command-line tool.

A config document has up to five sections, each optional::

    {"dataset": {...}, "model": {...}, "dream": {...}, "train": {...}, "experiment": {...}}

Every key defaults to the corresponding library default. Unknown sections or
keys, wrong types, and out-of-range values are rejected with ConfigError.
:meth:`CliConfig.to_dict` returns the effective (defaults-merged) document,
which loads back to an identical config.
"""

from __future__ import annotations

import json
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from typing import Any, Optional

from .dream import DreamConfig
from .errors import ConfigError
from .evaluation import ExperimentSpec
from .model import Arch
from .synth import CLASSES, DOMAINS
from .training import TrainConfig

SECTIONS = ("dataset", "model", "dream", "train", "experiment")

# derived from the data or from other sections, so not user-settable
_DREAM_DERIVED = ("lower_bound", "upper_bound")
_MODEL_DERIVED = ("in_channels", "input_size", "num_classes")
_EXPERIMENT_DERIVED = ("train", "arch")


@dataclass
class DatasetConfig:
    seed: int = 0
    per_cell: int = 200
    size: int = 32
    domains: tuple = DOMAINS
    classes: tuple = CLASSES

    def validate(self) -> None:
        if self.per_cell < 2:
            raise ConfigError(f"dataset.per_cell must be >= 2, got {self.per_cell}")
        if self.size < 8:
            raise ConfigError(f"dataset.size must be >= 8, got {self.size}")
        if not self.domains or not self.classes:
            raise ConfigError("dataset.domains and dataset.classes must be non-empty")
        for d in self.domains:
            if d not in DOMAINS:
                raise ConfigError(f"dataset.domains: unknown domain {d!r}; choose from {list(DOMAINS)}")
        for c in self.classes:
            if c not in CLASSES:
                raise ConfigError(f"dataset.classes: unknown class {c!r}; choose from {list(CLASSES)}")
        if len(set(self.domains)) != len(self.domains) or len(set(self.classes)) != len(self.classes):
            raise ConfigError("dataset.domains and dataset.classes must not repeat entries")


@dataclass
class CliConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: Arch = field(default_factory=Arch)
    dream: DreamConfig = field(default_factory=DreamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)
    # keys the document set explicitly, per section; lets commands pick their own defaults
    explicit: dict = field(default_factory=dict, repr=False, compare=False)

    def train_config(self) -> TrainConfig:
        return replace(self.train, dream=self.dream)

    def experiment_spec(self) -> ExperimentSpec:
        return replace(self.experiment, train=self.train_config(), arch=self.arch)

    def to_dict(self) -> dict:
        dream = asdict(self.dream)
        for k in _DREAM_DERIVED:
            dream.pop(k)
        model = {"widths": list(self.arch.widths), "kernel_size": self.arch.kernel_size, "pool": self.arch.pool}
        train = asdict(self.train)
        train.pop("dream")
        exp = asdict(self.experiment)
        for k in _EXPERIMENT_DERIVED:
            exp.pop(k)
        return _jsonable({
            "dataset": asdict(self.dataset),
            "model": model,
            "dream": dream,
            "train": train,
            "experiment": exp,
        })

    def validate(self) -> None:
        self.dataset.validate()
        self.arch.validate()
        self.train_config().validate()
        self.experiment_spec().validate()
        for d in (self.experiment.targets or ()) + (self.experiment.train_domains or ()):
            if d not in self.dataset.domains:
                raise ConfigError(f"experiment refers to domain {d!r}, which is not in dataset.domains")


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _coerce(where: str, value: Any, hint: Any, default: Any) -> Any:
    """Check ``value`` against a field's annotation (or its default's type)."""
    origin = typing.get_origin(hint)
    if origin is typing.Union:  # Optional[...]
        if value is None:
            return None
        inner = [a for a in typing.get_args(hint) if a is not type(None)][0]
        return _coerce(where, value, inner, default)
    if hint is bool or hint == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int or hint == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float or hint == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str or hint == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if hint is tuple or hint == "tuple" or "tuple" in str(hint):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        sample = next(iter(default), None) if isinstance(default, tuple) else None
        out = []
        for i, item in enumerate(value):
            if sample is None:
                out.append(item)
            else:
                out.append(_coerce(f"{where}[{i}]", item, type(sample), sample))
        return tuple(out)
    return value


def _build_section(cls, name: str, raw: Any, base, skip: tuple = ()):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls) if f.name not in skip}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {unknown}; allowed: {sorted(known)}")
    updates = {}
    for key, value in raw.items():
        f = known[key]
        default = getattr(base, key)
        if f.default is MISSING and f.default_factory is MISSING:
            default = None
        updates[key] = _coerce(f"{name}.{key}", value, hints.get(key, type(default)), default)
    return replace(base, **updates)


def from_dict(doc: Any) -> CliConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {unknown}; allowed: {list(SECTIONS)}")
    cfg = CliConfig()
    cfg.dataset = _build_section(DatasetConfig, "dataset", doc.get("dataset", {}), cfg.dataset)
    cfg.arch = _build_section(Arch, "model", doc.get("model", {}), cfg.arch, _MODEL_DERIVED)
    cfg.dream = _build_section(DreamConfig, "dream", doc.get("dream", {}), cfg.dream, _DREAM_DERIVED)
    cfg.train = _build_section(TrainConfig, "train", doc.get("train", {}), cfg.train, ("dream",))
    cfg.experiment = _build_section(ExperimentSpec, "experiment", doc.get("experiment", {}), cfg.experiment,
                                    _EXPERIMENT_DERIVED)
    cfg.explicit = {name: set(doc.get(name, {})) for name in SECTIONS}
    cfg.arch = replace(cfg.arch, num_classes=len(cfg.dataset.classes), input_size=cfg.dataset.size)
    cfg.validate()
    return cfg


def loads(text: str) -> CliConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(doc)


def load(path: Optional[str]) -> CliConfig:
    """Load a config file; ``None`` gives the all-defaults config."""
    if path is None:
        return from_dict({})
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return loads(text)
