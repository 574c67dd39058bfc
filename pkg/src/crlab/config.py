"""Flat ``key = value`` configuration files.

One setting per line, ``#`` starts a comment. Keys are the TrainConfig field
names, a handful of dataset keys, and the experiment keys in EXPERIMENT_KEYS.
Unknown keys are rejected by name so typos never pass silently.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import DatasetSpec
from .numerics import ConfigError
from .trainer import TrainConfig

DATA_KEYS = {
    "n_classes": int,
    "input_dim": int,
    "noise": float,
    "labels_per_class": int,
    "n_unlabeled": int,
    "n_test": int,
    "center_radius": float,
}

EXPERIMENT_KEYS = {
    "seeds": int,  # number of consecutive seeds starting at ``seed``
    "ood_ratios": "floats",  # OOD counts as multiples of the unlabeled pool size
    "ood_preset": str,
    "axis": str,
    "values": "strings",
}

EXPERIMENT_DEFAULTS = {
    "seeds": 5,
    "ood_ratios": (0.0, 0.5, 1.0, 2.0),
    "ood_preset": "far",
    "axis": None,
    "values": None,
}

SEED_ENV = "CRLAB_SEED"


def _train_types() -> dict:
    return {f.name: f.type for f in fields(TrainConfig)}


def known_keys() -> dict:
    return {**_train_types(), **DATA_KEYS, **EXPERIMENT_KEYS}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def coerce(key: str, raw):
    """Convert a raw (usually string) value to the type expected for ``key``."""
    types = known_keys()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if kind in (bool, "bool"):
            return _parse_bool(text)
        if kind in ("tuple[int, ...]",):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        if kind == "floats":
            return tuple(float(v) for v in text.replace(" ", "").split(",") if v)
        if kind == "strings":
            return tuple(v.strip() for v in text.split(",") if v.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None


def read_config_file(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    out = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{p}:{lineno}: expected key = value")
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in known_keys():
            raise ConfigError(f"{p}:{lineno}: unknown config key {key!r}")
        out[key] = coerce(key, value)
    return out


@dataclass
class ParsedConfig:
    train: TrainConfig
    data: DatasetSpec
    experiment: dict = field(default_factory=dict)

    def seeds(self) -> list[int]:
        n = self.experiment["seeds"]
        if n < 1:
            raise ConfigError("seeds must be >= 1")
        return list(range(self.train.seed, self.train.seed + n))

    def require(self, key: str):
        value = self.experiment.get(key)
        if value is None:
            raise ConfigError(f"missing required key {key!r}")
        return value

    def snapshot(self) -> dict:
        data = {k: getattr(self.data, k) for k in DATA_KEYS}
        exp = {k: list(v) if isinstance(v, tuple) else v for k, v in self.experiment.items()}
        return {"train": self.train.to_dict(), "data": data, "experiment": exp}

    def content_hash(self, command: str) -> str:
        doc = json.dumps({"command": command, **self.snapshot()}, sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()


def parse_config(path: str | Path | None = None, overrides: dict | None = None, env=None) -> ParsedConfig:
    """Defaults, then the file, then ``overrides`` (flags win).

    When neither the file nor the flags set ``seed``, the CRLAB_SEED
    environment variable is used if present.
    """
    env = os.environ if env is None else env
    merged = read_config_file(path) if path is not None else {}
    for k, v in (overrides or {}).items():
        merged[k] = coerce(k, v)
    if "seed" not in merged and env.get(SEED_ENV):
        merged["seed"] = coerce("seed", env[SEED_ENV])
    train_keys = _train_types()
    train = TrainConfig(**{k: v for k, v in merged.items() if k in train_keys})
    train.validate()
    data = DatasetSpec(seed=train.seed, **{k: v for k, v in merged.items() if k in DATA_KEYS})
    data.validate()
    exp = dict(EXPERIMENT_DEFAULTS)
    exp.update({k: v for k, v in merged.items() if k in EXPERIMENT_KEYS})
    return ParsedConfig(train, data, exp)
