"""Tracker hyperparameters."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

SCALES: tuple[int, ...] = (16, 8, 4)


class ConfigError(ValueError):
    """A configuration value violates its invariant."""


@dataclass(frozen=True)
class TrackerConfig:
    memory_gap: int = 50
    """Frames between long-term memory writes."""
    memory_capacity: int = 8
    """Long-term slots, not counting the pinned first frame."""
    tau: float = 0.1
    """IoU the refined mask must strictly exceed to replace the propagated one."""
    gpm_layers_16: int = 3
    gpm_layers_8: int = 1
    vis_channels: int = 16
    id_channels: int = 16
    seed: int = 0
    init: str = "random"
    """Parameter initialisation: ``random`` or ``matching``."""

    def __post_init__(self) -> None:
        if self.memory_gap < 1:
            raise ConfigError(f"memory_gap must be >= 1, got {self.memory_gap}")
        if self.memory_capacity < 1:
            raise ConfigError(f"memory_capacity must be >= 1, got {self.memory_capacity}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        if self.gpm_layers_16 < 0 or self.gpm_layers_8 < 0:
            raise ConfigError("GPM layer counts must be >= 0")
        if self.vis_channels < 1 or self.id_channels < 1:
            raise ConfigError("channel widths must be >= 1")
        if self.init not in ("random", "matching"):
            raise ConfigError(f"unknown init {self.init!r}")

    def gpm_layers(self, scale: int) -> int:
        return {16: self.gpm_layers_16, 8: self.gpm_layers_8}.get(scale, 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrackerConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> TrackerConfig:
        with open(path) as f:
            return cls.from_dict(json.load(f))
