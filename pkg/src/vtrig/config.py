"""Experiment configuration files and seed derivation.

Configs are TOML (or JSON, by extension). Every stochastic stage draws from
its own ``numpy.random.SeedSequence`` spawned from the root seed with the
CRC-32 of the stage name as spawn key, so a stage can be rerun alone and
still see the same random stream.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["load_config", "merge", "set_dotted", "config_hash", "stage_seed", "stage_rng"]


def load_config(path):
    """Read a TOML or JSON file into a dict; errors become ``ConfigError``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw)
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return data


def merge(base, override):
    """Recursive dict merge; values from ``override`` win."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_dotted(cfg, assignment):
    """Apply ``section.key=value``; the value is parsed as a TOML literal when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    dotted, text = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    try:
        value = tomllib.loads(f"v = {text.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = text.strip()
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not a table")
    node[keys[-1]] = value
    return cfg


def config_hash(cfg):
    """SHA-256 of the canonical JSON form of ``cfg``."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()


def stage_seed(root_seed, stage):
    return np.random.SeedSequence(int(root_seed), spawn_key=(zlib.crc32(stage.encode()),))


def stage_rng(root_seed, stage):
    return np.random.default_rng(stage_seed(root_seed, stage))
