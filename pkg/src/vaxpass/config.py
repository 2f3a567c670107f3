"""Global configuration shared by every layer of the passport stack."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

DEFAULT_ROWS = 20
DEFAULT_COLS = 480
DEFAULT_MAX_SHIFTS = 8
DEFAULT_HASH_BITS = 256
DEFAULT_LAMBDA = 128
DEFAULT_THRESHOLD = 0.3


class ConfigError(ValueError):
    """Raised for invalid configuration values or inconsistent options."""


@dataclass(frozen=True)
class Config:
    rows: int = DEFAULT_ROWS
    cols: int = DEFAULT_COLS
    max_shifts: int = DEFAULT_MAX_SHIFTS
    masking_mode: str = "type1"
    p_intra: float = 0.1
    mask_density: float = 0.1
    seed: int = 0
    hash_bits: int = DEFAULT_HASH_BITS
    security_lambda: int = DEFAULT_LAMBDA
    threshold: float = DEFAULT_THRESHOLD
    rotation_search: bool = False
    empty_blocks: bool = True
    impostor_cap: int = 10

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"template dimensions must be >= 1, got {self.rows}x{self.cols}")
        if self.max_shifts < 0:
            raise ConfigError("max_shifts must be non-negative")
        if self.masking_mode not in ("type1", "type2"):
            raise ConfigError(f"unknown masking_mode {self.masking_mode!r}")
        if not 0.0 <= self.p_intra < 0.5:
            raise ConfigError("p_intra must lie in [0, 0.5)")
        if not 0.0 <= self.mask_density < 1.0:
            raise ConfigError("mask_density must lie in [0, 1)")
        if self.hash_bits < 1:
            raise ConfigError("hash_bits must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie strictly between 0 and 1")
        if self.impostor_cap < 1:
            raise ConfigError("impostor_cap must be >= 1")

    @property
    def n(self) -> int:
        """Feature vector length."""
        return self.rows * self.cols

    def with_overrides(self, **kwargs: Any) -> "Config":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
