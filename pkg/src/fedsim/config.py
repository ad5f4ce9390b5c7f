"""Flat ``key = value`` scenario files.

Grammar, one entry per line::

    line    := blank | comment | entry
    comment := "#" any*
    entry   := key ws* "=" ws* value ws* ("#" any*)?
    key     := name ("." name)?
    value   := scalar | scalar ("," scalar)+

Unsectioned keys set :class:`ScenarioConfig` fields. The sections
``aggregator``, ``fedcpa``, ``train``, ``data`` and ``trigger`` address the
nested configs; ``analysis.rounds`` lists rounds to snapshot for the rank
analysis. ``aggregator.name`` is mandatory; everything else has a default.
Booleans accept true/false/yes/no/1/0, optional fields accept ``none``.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .aggregators import FedCpaConfig
from .data import TriggerSpec
from .model import TrainConfig
from .simulation import AggregatorConfig, DataConfig, ScenarioConfig

REQUIRED = ("aggregator.name",)

SECTIONS = {
    "": ScenarioConfig,
    "aggregator": AggregatorConfig,
    "fedcpa": FedCpaConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "trigger": TriggerSpec,
}
# fields that are configured through their own section instead
_NESTED = {("", "aggregator"), ("", "train"), ("", "data"), ("", "trigger"), ("aggregator", "fedcpa")}


class ConfigError(ValueError):
    """A config file problem; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        self.line, self.key = line, key
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


@dataclass
class RunSpec:
    """A parsed config file: the scenario plus extra run options."""

    scenario: ScenarioConfig
    analysis_rounds: tuple = ()
    overrides: dict = field(default_factory=dict)


def _is_optional(tp) -> tuple[bool, Any]:
    args = typing.get_args(tp)
    origin = typing.get_origin(tp)
    if (origin is typing.Union or origin is types.UnionType) and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return True, rest[0]
    return False, tp


def _scalar(text: str, tp):
    if tp is bool:
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    raise ValueError(f"unsupported field type {tp}")


def coerce(text: str, tp):
    optional, tp = _is_optional(tp)
    if optional and text.lower() == "none":
        return None
    if typing.get_origin(tp) is tuple:
        inner = typing.get_args(tp)[0]
        items = [t.strip() for t in text.split(",") if t.strip()]
        if not items:
            raise ValueError("expected a comma-separated list")
        return tuple(_scalar(t, inner) for t in items)
    return _scalar(text, tp)


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def parse_text(text: str) -> dict:
    """Split a config file into ``{key: (value_text, line_no)}``."""
    entries: dict = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", no)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"empty key or value in {raw.strip()!r}", no)
        if key in entries:
            raise ConfigError(f"duplicate key {key!r} (first set on line {entries[key][1]})", no, key)
        entries[key] = (value, no)
    return entries


def _field_default(cls, name: str):
    f = next(f for f in fields(cls) if f.name == name)
    return f.default_factory() if f.default is dataclasses.MISSING else f.default


def build(entries: dict, seed: Optional[int] = None) -> RunSpec:
    for key in REQUIRED:
        if key not in entries:
            raise ConfigError(f"missing required field {key!r}", key=key)
    values: dict = {name: {} for name in SECTIONS}
    analysis_rounds: tuple = ()
    for key, (text, no) in entries.items():
        section, _, name = key.rpartition(".")
        if key == "analysis.rounds":
            try:
                analysis_rounds = coerce(text, tuple[int, ...])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}", no, key) from None
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown section in key {key!r}", no, key)
        types_ = _field_types(SECTIONS[section])
        if name not in types_ or (section, name) in _NESTED:
            raise ConfigError(f"unknown field {key!r}", no, key)
        try:
            values[section][name] = coerce(text, types_[name])
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", no, key) from None
    if seed is not None:
        values[""]["master_seed"] = seed

    def make(section, parent=None, **nested):
        try:
            if parent is None:
                return SECTIONS[section](**values[section], **nested)
            # start from the parent's default, which may differ from the class default
            return replace(_field_default(parent, section), **values[section], **nested)
        except (ValueError, TypeError) as exc:
            first = min((entries[f"{section}.{k}" if section else k][1]
                         for k in values[section] if (f"{section}.{k}" if section else k) in entries),
                        default=None)
            raise ConfigError(f"invalid {section or 'scenario'} settings: {exc}", first) from None

    aggregator = make("aggregator", ScenarioConfig, fedcpa=make("fedcpa", AggregatorConfig))
    scenario = make("", aggregator=aggregator, train=make("train", ScenarioConfig),
                    data=make("data", ScenarioConfig), trigger=make("trigger", ScenarioConfig))
    return RunSpec(scenario, analysis_rounds, {k: v[0] for k, v in entries.items()})


def load(path, seed: Optional[int] = None) -> RunSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return build(parse_text(text), seed)


def with_axis(scenario: ScenarioConfig, axis: str, value) -> ScenarioConfig:
    """Copy of ``scenario`` with one top-level sweep axis replaced."""
    types_ = _field_types(ScenarioConfig)
    return replace(scenario, **{axis: coerce(str(value), types_[axis])})


def to_dict(scenario: ScenarioConfig) -> dict:
    out = dataclasses.asdict(scenario)
    out["hidden"] = list(scenario.hidden)
    return out
