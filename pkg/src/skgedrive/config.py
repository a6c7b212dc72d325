"""Flat key=value run configuration.

All tunables live in one namespace-dotted key space with typed defaults;
unknown keys are rejected by name so config-file typos fail loudly. A
config file holds one `key = value` pair per line, with # comments.
"""

from __future__ import annotations

from typing import Dict

from .errors import ConfigError

DEFAULTS: Dict[str, object] = {
    "backbone.input_size": 64,
    "backbone.patch": 4,
    "backbone.window": 4,
    "backbone.embed_dim": 24,
    "backbone.depths": "1,1,2,1",
    "backbone.heads": "2,4,8,16",
    "backbone.variant": "desk",
    "skge.route_a": "1->4",
    "skge.route_b": "1->4",
    "bev.size": 64,
    "bev.resolution_m": 0.25,
    "bev.use_lidar": 0,
    "train.lr": 1e-4,
    "train.weight_decay": 0.001,
    "train.batch_size": 8,
    "train.patience_lr": 3,
    "train.patience_stop": 15,
    "train.seed": 0,
}


class RunConfig:
    """Typed flat config; item access by full dotted key."""

    def __init__(self, overrides: Dict[str, object] | None = None):
        self._values = dict(DEFAULTS)
        for key, value in (overrides or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        default = DEFAULTS[key]
        try:
            if isinstance(default, bool):
                self._values[key] = bool(int(value))
            elif isinstance(default, int):
                self._values[key] = int(value)
            elif isinstance(default, float):
                self._values[key] = float(value)
            else:
                self._values[key] = str(value)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value {value!r} for config key {key!r}") from None

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def as_dict(self) -> Dict[str, object]:
        return dict(self._values)

    def load_file(self, path) -> "RunConfig":
        with open(path) as fh:
            for ln, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{ln}: expected key=value, got {raw.strip()!r}")
                key, value = (part.strip() for part in line.split("=", 1))
                self.set(key, value)
        return self
