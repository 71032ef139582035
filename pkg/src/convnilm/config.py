"""Run configuration: INI file with [model], [train] and [data] sections.

Every key has a default matching the published training setup; values
from a config file are applied first, then ``section.key=value`` overrides.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    dataset: str = "redd"
    root: str = ""
    house: int = 1
    top: int = 5
    # one day per window: 86400 samples at 1 s (REDD), 14400 at 6 s (UK-DALE)
    window: int = 0
    fold: int = -1

    def window_length(self) -> int:
        if self.window:
            return self.window
        return 86400 if self.dataset == "redd" else 14400


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section in ("model", "train", "data"):
            obj = getattr(self, section)
            cp[section] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_ini())


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse(raw: str, default, name: str):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if raw.lower() == "none":
        return None
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or default is None:
        return float(raw)
    return raw


def _apply(obj, updates: dict[str, str], section: str):
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in updates.items():
        if key not in names:
            raise ValueError(f"unknown key {section}.{key}")
        changes[key] = _parse(raw, getattr(obj, key), f"{section}.{key}")
    return dataclasses.replace(obj, **changes) if changes else obj


def load_run_config(path=None, overrides: list[str] | None = None,
                    base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    sections: dict[str, dict[str, str]] = {"model": {}, "train": {}, "data": {}}
    if path:
        cp = configparser.ConfigParser()
        with open(path) as fh:
            cp.read_file(fh)
        for name in cp.sections():
            if name not in sections:
                raise ValueError(f"unknown config section [{name}]")
            sections[name].update(cp[name])
    for item in overrides or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in sections:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        sections[section][name] = value
    return RunConfig(_apply(cfg.model, sections["model"], "model"),
                     _apply(cfg.train, sections["train"], "train"),
                     _apply(cfg.data, sections["data"], "data"))
