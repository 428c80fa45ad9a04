"""INI-style configuration: dataclass <-> section conversion and the run config.

A run file holds optional sections ``[target]``, ``[draft]``, ``[future]``,
``[train.target]``, ``[train.draft]``, ``[train.confu]``, ``[corpus]`` and ``[experiment]``/``[checkpoints]``.  Keys are
dataclass field names; tuples are comma-separated.  ``CONFU_SEED`` in the
environment overrides every seed.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import os
import types
import typing
from dataclasses import dataclass
from typing import Any

from .data import SyntheticSpec
from .draft import DraftConfig
from .errors import ConfigError
from .target import TargetConfig
from .training import FutureConfig, TrainConfig

SEED_ENV = "CONFU_SEED"


def _render_value(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(_render_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return "" if value is None else str(value)


def _parse_scalar(kind, text: str):
    text = text.strip()
    if kind is bool:
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"not a boolean: {text!r}")
        return text.lower() in ("true", "1", "yes")
    return kind(text)


def _parse_value(tp, text: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        inner = [a for a in args if a is not type(None)]
        if not text.strip():
            return None
        return _parse_value(inner[0], text)
    if origin is tuple:
        items = [t for t in (x.strip() for x in text.split(",")) if t]
        kind = args[0] if args else str
        return tuple(_parse_scalar(kind, t) for t in items)
    return _parse_scalar(tp, text)


def to_section(obj) -> dict[str, str]:
    return {f.name: _render_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def from_section(cls, section: typing.Mapping[str, str]):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown keys for [{cls.__name__}]: {sorted(unknown)}")
    kwargs = {}
    for key, text in section.items():
        try:
            kwargs[key] = _parse_value(hints[key], text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None
    return cls(**kwargs)


def read_ini(path: str | os.PathLike) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    return parser


def env_seed(default: int) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


@dataclass(frozen=True)
class CorpusConfig:
    """Either a UTF-8 text file (``path``) or the seeded synthetic source."""

    path: str = ""
    seq_len: int = 64
    n_topics: int = 2
    words_per_topic: int = 12
    successors: int = 2
    n_sequences: int = 512
    seed: int = 0

    def synthetic(self) -> SyntheticSpec:
        return SyntheticSpec(
            self.n_topics, self.words_per_topic, self.successors, self.n_sequences, self.seed
        )


@dataclass(frozen=True)
class RunConfig:
    target: TargetConfig = TargetConfig()
    draft: DraftConfig = DraftConfig()
    future: FutureConfig = FutureConfig()
    train_target: TrainConfig = TrainConfig(steps=2000, batch=16, lr=3e-3)
    train_draft: TrainConfig = TrainConfig()
    train_confu: TrainConfig = TrainConfig()
    corpus: CorpusConfig = CorpusConfig()

    def with_seed(self, seed: int) -> "RunConfig":
        """Same run with every seed replaced (training stages and corpus)."""
        return dataclasses.replace(
            self,
            train_target=dataclasses.replace(self.train_target, seed=seed),
            train_draft=dataclasses.replace(self.train_draft, seed=seed),
            train_confu=dataclasses.replace(self.train_confu, seed=seed),
            corpus=dataclasses.replace(self.corpus, seed=seed),
        )


_RUN_SECTIONS = {
    "target": TargetConfig,
    "draft": DraftConfig,
    "future": FutureConfig,
    "train.target": TrainConfig,
    "train.draft": TrainConfig,
    "train.confu": TrainConfig,
    "corpus": CorpusConfig,
}


def _attr(section: str) -> str:
    return section.replace(".", "_")


def load_run_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    parser = read_ini(path)
    parts = {}
    for name, cls in _RUN_SECTIONS.items():
        if parser.has_section(name):
            parts[_attr(name)] = from_section(cls, dict(parser[name]))
    return RunConfig(**parts)


def render_run_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in _RUN_SECTIONS:
        parser[name] = to_section(getattr(cfg, _attr(name)))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
