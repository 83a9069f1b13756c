"""INI configuration with namespaced sections.

Every tunable lives in one of four sections::

    [cpit]   eta, gamma, beta, n_styles, seed, mix_space
    [train]  epochs, lr, batch_size, input_side, hidden_dim
    [data]   num_domains, num_classes, patches_per_domain, patch_side,
             confound_rho, cast_strength, artifact_strength, artifact_freq, seed
    [eval]   methods, seeds, held_out

Values are resolved in the order defaults < file < environment < command
line.  An environment variable ``CPIT_<SECTION>_<KEY>`` (for example
``CPIT_TRAIN_EPOCHS=5``) overrides the file.  Unknown sections or keys are
errors, and every value is range-checked when the config is built.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
import io
import os
from pathlib import Path

from .datagen import GenSpec
from .evaluation import METHODS, TrainSettings
from .model import CpitConfig

ENV_PREFIX = "CPIT_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalSettings:
    methods: tuple = ("baseline", "stainnorm", "clear")
    seeds: tuple = (1, 2, 3)
    held_out: tuple = ()  # empty means every domain in turn

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "held_out", tuple(self.held_out))
        if not self.methods or not self.seeds:
            raise ValueError("methods and seeds must be non-empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        if any(s < 0 for s in self.seeds):
            raise ValueError("seeds must be non-negative")


SECTIONS = {"cpit": CpitConfig, "train": TrainSettings, "data": GenSpec, "eval": EvalSettings}


@dataclass(frozen=True)
class Config:
    cpit: CpitConfig = field(default_factory=CpitConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: GenSpec = field(default_factory=GenSpec)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_ini(self):
        parser = configparser.ConfigParser()
        for section in SECTIONS:
            obj = getattr(self, section)
            parser[section] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue().rstrip() + "\n"


def _format(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(section, key, text, default):
    text = text.strip()
    try:
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            return tuple(int(t) for t in items) if key == "seeds" else tuple(items)
        if isinstance(default, bool):
            return {"true": True, "false": False}[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except (ValueError, KeyError):
        raise ConfigError(f"[{section}] {key} = {text!r}: expected {type(default).__name__}") from None


def _defaults(section):
    obj = SECTIONS[section]()
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _apply(raw, section, key, text, origin):
    if section not in SECTIONS:
        raise ConfigError(f"{origin}: unknown section [{section}]; expected one of {sorted(SECTIONS)}")
    defaults = _defaults(section)
    if key not in defaults:
        raise ConfigError(f"{origin}: unknown key {key!r} in [{section}]; expected one of {sorted(defaults)}")
    raw[section][key] = _coerce(section, key, text, defaults[key])


def load_config(path=None, env=None, overrides=None):
    """Resolve a :class:`Config`.

    ``overrides`` maps ``(section, key)`` to already-typed values (command
    line flags); ``None`` values are ignored.
    """
    env = os.environ if env is None else env
    raw = {s: {} for s in SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if parser.defaults():
            raise ConfigError(f"{path}: keys outside a section are not allowed")
        for section in parser.sections():
            for key, text in parser.items(section, raw=True):
                _apply(raw, section, key, text, str(path))
    for name, text in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        section, _, key = name[len(ENV_PREFIX):].lower().partition("_")
        _apply(raw, section, key, text, f"environment {name}")
    for (section, key), value in (overrides or {}).items():
        if value is not None:
            if section not in SECTIONS or key not in _defaults(section):
                raise ConfigError(f"unknown override {section}.{key}")
            raw[section][key] = value
    try:
        parts = {s: replace(SECTIONS[s](), **raw[s]) for s in SECTIONS}
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return Config(**parts)


def write_config(config, path):
    Path(path).write_text(config.to_ini())
