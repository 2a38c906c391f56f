"""Run configuration: an INI document validated against :data:`GRAMMAR`.

Any scalar can be overridden from the environment as
``FIELDCTR_<SECTION>_<KEY>`` (e.g. ``FIELDCTR_TRAIN_LEARNING_RATE=0.01``).
Relative paths resolve against the directory of the config file.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

from .enhancement import FIE_MODES, FRE_VARIANTS, LAMBDA_GRID
from .model import BACKBONES

ENV_PREFIX = "FIELDCTR_"


class ConfigError(ValueError):
    pass


def _opt_float(s):
    return None if s.strip().lower() in ("", "none") else float(s)


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _pairs(s):
    out = []
    for item in s.split(","):
        if item.strip():
            a, b = item.split(":")
            out.append((a.strip(), b.strip()))
    return tuple(out)


def _choice(*options):
    def parse(s):
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return s
    return parse


def _positive(conv):
    def parse(s):
        v = conv(s)
        if not v > 0:
            raise ValueError(f"must be > 0, got {v}")
        return v
    return parse


def _non_negative(conv):
    def parse(s):
        v = conv(s)
        if v < 0:
            raise ValueError(f"must be >= 0, got {v}")
        return v
    return parse


_PATH = object()

# section -> key -> (parser, default); _PATH marks a path resolved against the config dir
GRAMMAR = {
    "data": {
        "schema": (_PATH, ""),
        "table": (_PATH, ""),
        "rating_threshold": (float, "4"),
        "drop_neutral": (_opt_float, ""),
        "k_core": (_non_negative(int), "0"),
        "core_fields": (lambda s: tuple(v.strip() for v in s.split(",") if v.strip()), "user_id,item_id"),
        "split_ratios": (_floats, "0.8,0.1,0.1"),
    },
    "embeddings": {
        "source": (_choice("file", "synthetic"), "synthetic"),
        "path": (_PATH, ""),
        "untuned_path": (_PATH, ""),
        "synthetic_mode": (_choice("structured", "raw"), "raw"),
        "synthetic_dim": (_positive(int), "64"),
        "clusters": (_pairs, ""),
    },
    "model": {
        "backbone": (_choice(*BACKBONES), "fm"),
        "embedding_dim": (_positive(int), "32"),
        "hidden_units": (_ints, "64,64"),
        "init_std": (_positive(float), "0.01"),
    },
    "enhancement": {
        "lambda_kl": (_non_negative(float), "0"),
        "alignment": (_choice(*FRE_VARIANTS), "kl"),
        "cl_temperature": (_positive(float), "0.02"),
        "lambda_fm": (_non_negative(float), "0"),
        "fie_mode": (_choice("auto", *FIE_MODES), "auto"),
        "adaptor_init": (_choice("uniform", "identity"), "uniform"),
    },
    "train": {
        "learning_rate": (_positive(float), "0.001"),
        "weight_decay": (_non_negative(float), "0"),
        "batch_size": (_positive(int), "256"),
        "max_epochs": (_positive(int), "20"),
        "patience": (_positive(int), "3"),
        "seed": (int, "0"),
        "shuffle": (_bool, "true"),
        "base_auc": (_opt_float, ""),
    },
    "corpus": {
        "samples_per_field": (_positive(int), "1000"),
        "template_id": (str, "default-v1"),
    },
    "sweep": {
        "lambda_kl_grid": (_floats, ",".join(str(v) for v in LAMBDA_GRID)),
        "lambda_fm_grid": (_floats, ",".join(str(v) for v in LAMBDA_GRID)),
    },
    "output": {
        "dir": (_PATH, "out"),
    },
}


@dataclass
class RunConfig:
    sections: dict = field(default_factory=dict)
    base_dir: str = "."

    def __getitem__(self, section) -> dict:
        return self.sections[section]

    def set(self, section, key, raw: str):
        self.sections[section][key] = _parse(section, key, raw, self.base_dir)


def _parse(section, key, raw, base_dir):
    if section not in GRAMMAR:
        raise ConfigError(f"unknown section [{section}]")
    if key not in GRAMMAR[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    conv, _ = GRAMMAR[section][key]
    if conv is _PATH:
        raw = raw.strip()
        return "" if not raw else os.path.normpath(os.path.join(base_dir, os.path.expanduser(raw)))
    try:
        return conv(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None


def load_config(path=None, environ=None) -> RunConfig:
    """Parse ``path`` (optional), apply defaults, then environment overrides."""
    environ = os.environ if environ is None else environ
    parser = configparser.ConfigParser(interpolation=None)
    base_dir = "."
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base_dir = os.path.dirname(os.path.abspath(path))

    cfg = RunConfig({}, base_dir)
    for section, keys in GRAMMAR.items():
        cfg.sections[section] = {}
        for key, (_, default) in keys.items():
            raw = parser.get(section, key, fallback=default) if parser.has_section(section) else default
            cfg.sections[section][key] = _parse(section, key, raw, base_dir)
    for section in parser.sections():
        if section not in GRAMMAR:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in GRAMMAR[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")

    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section not in GRAMMAR or key not in GRAMMAR[section]:
            raise ConfigError(f"environment override {name} does not name a config key")
        # env paths resolve against the working directory
        cfg.sections[section][key] = _parse(section, key, raw, ".")
    return cfg
