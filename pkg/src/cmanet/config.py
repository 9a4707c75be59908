"""``key = value`` configuration files shared by data generation and training.

Grammar, one entry per line::

    # comment (also allowed after a value)
    key = value

Values are parsed by the type of the field they set: ints, floats, booleans
(``true``/``false``/``1``/``0``), comma-separated tuples (``5, 1``), and for
``cma_insertion`` a comma-separated list of ``stage:block`` pairs (empty for
none). Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

from cmanet.data import DataConfig
from cmanet.training import TrainConfig


class ConfigSyntaxError(ValueError):
    pass


@dataclass
class ModelConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    cma_insertion: tuple[tuple[int, int], ...] = ((1, 0), (2, 0))


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    n_train: int = 2000
    n_val: int = 500

    def sections(self):
        return (("", self), ("train", self.train), ("data", self.data), ("model", self.model))


def _fields(obj):
    hints = typing.get_type_hints(type(obj))
    return [(f.name, hints[f.name]) for f in dataclasses.fields(obj) if not dataclasses.is_dataclass(getattr(obj, f.name))]


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(key: str, text: str, hint):
    text = text.strip()
    if key == "cma_insertion":
        if not text:
            return ()
        pairs = []
        for item in text.split(","):
            s, _, b = item.strip().partition(":")
            pairs.append((int(s), int(b)))
        return tuple(pairs)
    origin = typing.get_origin(hint)
    if origin is tuple:
        args = typing.get_args(hint)
        elem = args[0]
        parts = [p for p in (x.strip() for x in text.split(",")) if p]
        return tuple(elem(p) for p in parts)
    if hint is bool:
        return _parse_bool(text)
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return text


def _format_value(key: str, value) -> str:
    if key == "cma_insertion":
        return ", ".join(f"{s}:{b}" for s, b in value)
    if isinstance(value, tuple):
        return ", ".join(_format_value("", v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _index(cfg: ExperimentConfig):
    table = {}
    for _, obj in cfg.sections():
        for name, hint in _fields(obj):
            table[name] = (obj, hint)
    return table


def set_value(cfg: ExperimentConfig, key: str, text: str) -> None:
    table = _index(cfg)
    if key not in table:
        raise ConfigSyntaxError(f"unknown config key {key!r}")
    obj, hint = table[key]
    try:
        setattr(obj, key, _parse_value(key, text, hint))
    except ValueError as exc:
        raise ConfigSyntaxError(f"bad value for {key}: {exc}") from None


def parse_config(text: str, cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = cfg or ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigSyntaxError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        try:
            set_value(cfg, key.strip(), value)
        except ConfigSyntaxError as exc:
            raise ConfigSyntaxError(f"line {lineno}: {exc}") from None
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    # re-run dataclass checks after field-by-field assignment
    try:
        TrainConfig.__post_init__(cfg.train)
    except ValueError as exc:
        raise ConfigSyntaxError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, obj in cfg.sections():
        if section:
            lines.append(f"# {section}")
        for name, _ in _fields(obj):
            lines.append(f"{name} = {_format_value(name, getattr(obj, name))}")
    return "\n".join(lines) + "\n"
