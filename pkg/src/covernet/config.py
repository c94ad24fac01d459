"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. ``model`` picks the defaults
(``alexnet30`` or ``lenet``); every other key overrides one of them.
Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass

from .errors import ConfigError
from .optim import LrSchedule

MODEL_DEFAULTS = {
    "alexnet30": dict(optimizer="sgd_momentum", baseRate=0.01, dropEvery=100_000, dropFactor=10.0,
                      iterations=450_000, batchSize=128),
    "lenet": dict(optimizer="adam", baseRate=1e-4, dropEvery=math.inf, dropFactor=1.0,
                  iterations=30_000, batchSize=200),
}

PATH_KEYS = ("manifest", "classTable", "imageRoot", "checkpointDir", "splitDir", "pretrained")


@dataclass
class RunConfig:
    model: str = "lenet"
    seed: int = 0
    batchSize: int = 200
    iterations: int = 30_000
    optimizer: str = "adam"
    baseRate: float = 1e-4
    dropEvery: float = math.inf
    dropFactor: float = 1.0
    keepProb: float = 0.5
    poolStrideLiteral: bool = False
    meanSubtract: bool = True
    checkpointEvery: int = 1000
    manifest: str = ""
    classTable: str = ""
    imageRoot: str = ""
    checkpointDir: str = "checkpoints"
    splitDir: str = "split"
    pretrained: str = ""

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.baseRate, self.dropFactor, self.dropEvery)

    def validate(self):
        if self.model not in MODEL_DEFAULTS:
            raise ConfigError(f"model must be one of {sorted(MODEL_DEFAULTS)}, got {self.model!r}")
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batchSize < 1 or self.iterations < 0 or self.checkpointEvery < 1:
            raise ConfigError("batchSize and checkpointEvery must be >= 1, iterations >= 0")
        if not 0 < self.keepProb <= 1:
            raise ConfigError("keepProb must be in (0, 1]")
        if self.baseRate <= 0 or not self.dropEvery > 0:
            raise ConfigError("baseRate and dropEvery must be positive")
        return self

    def require_paths(self, *keys, dirs=()):
        """Fail early if a required path is unset or missing on disk."""
        for key in keys:
            value = getattr(self, key)
            if not value:
                raise ConfigError(f"config key {key!r} is required")
            if not os.path.exists(value):
                raise ConfigError(f"{key}: {value!r} does not exist")
        for key in dirs:
            value = getattr(self, key)
            if not value:
                raise ConfigError(f"config key {key!r} is required")

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float) and math.isinf(value):
                value = "inf"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key, raw):
    kind = _FIELDS[key].type
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            if raw.lower() in ("inf", "none", "never"):
                return math.inf
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, base_dir=None, **overrides) -> RunConfig:
    """Parse config text; relative paths resolve against ``base_dir``."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    for key, value in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = value
    model = values.get("model", "lenet")
    merged = {**MODEL_DEFAULTS.get(model, {}), **values}
    cfg = RunConfig(**merged)
    if base_dir is not None:
        for key in PATH_KEYS:
            value = getattr(cfg, key)
            if value and not os.path.isabs(value):
                setattr(cfg, key, os.path.normpath(os.path.join(base_dir, value)))
    return cfg.validate()


def load_config(path, **overrides) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, os.path.dirname(os.path.abspath(path)), **overrides)
