"""Pipeline configuration: flat JSON file, CLI flags override file values."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

_U64_MAX = (1 << 64) - 1


@dataclass
class PipelineConfig:
    patch_size: int = 768
    h_threshold: float = 0.017
    sampling_ratio: float = 0.05
    coverage_min: float = 0.5
    eval_dim: int = 96
    seed: int = 0
    clip_density: float = 10000.0
    thumbnail_max_dim: int = 2048
    stain_matrix: list | None = None  # 9 reals row-major, None = built-in vectors
    workers: int = 1
    tolerate_failures: bool = False
    backend: str = "mock"

    def __post_init__(self):
        if not isinstance(self.patch_size, int) or self.patch_size < 64:
            raise ConfigError(f"patch_size must be an integer >= 64, got {self.patch_size!r}")
        if not 0.0 < self.sampling_ratio <= 1.0:
            raise ConfigError(f"sampling_ratio must be in (0, 1], got {self.sampling_ratio!r}")
        if self.h_threshold < 0:
            raise ConfigError(f"h_threshold must be >= 0, got {self.h_threshold!r}")
        if not 0.0 <= self.coverage_min <= 1.0:
            raise ConfigError(f"coverage_min must be in [0, 1], got {self.coverage_min!r}")
        if not isinstance(self.eval_dim, int) or self.eval_dim < 1:
            raise ConfigError(f"eval_dim must be a positive integer, got {self.eval_dim!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed <= _U64_MAX:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if self.clip_density <= 0:
            raise ConfigError(f"clip_density must be > 0, got {self.clip_density!r}")
        if not isinstance(self.thumbnail_max_dim, int) or self.thumbnail_max_dim < 1:
            raise ConfigError(f"thumbnail_max_dim must be a positive integer, got {self.thumbnail_max_dim!r}")
        if self.stain_matrix is not None:
            if len(self.stain_matrix) != 9 or not all(isinstance(v, (int, float)) for v in self.stain_matrix):
                raise ConfigError("stain_matrix must be 9 numbers, row-major 3x3")
            self.stain_matrix = [float(v) for v in self.stain_matrix]
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError(f"workers must be a positive integer, got {self.workers!r}")
        if not isinstance(self.tolerate_failures, bool):
            raise ConfigError("tolerate_failures must be a boolean")
        if not isinstance(self.backend, str) or not self.backend:
            raise ConfigError("backend must be a non-empty string")

    def snapshot(self) -> dict:
        """Plain-dict copy of every field, suitable for the run manifest."""
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """SHA-256 over the canonical JSON snapshot; embedded in artifacts."""
        canon = json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("ascii")).hexdigest()

    def replace(self, **overrides) -> "PipelineConfig":
        return load_config(values={**self.snapshot(), **overrides})


_FIELDS = {f.name for f in dataclasses.fields(PipelineConfig)}


def load_config(path: str | Path | None = None, values: dict | None = None) -> PipelineConfig:
    """Build a config from an optional flat JSON file plus override values.

    Unknown keys are rejected rather than ignored so typos fail loudly.
    """
    merged: dict = {}
    if path is not None:
        try:
            raw = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a flat JSON object")
        merged.update(data)
    if values:
        merged.update({k: v for k, v in values.items() if v is not None})
    unknown = sorted(set(merged) - _FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return PipelineConfig(**merged)
    except TypeError as e:
        raise ConfigError(str(e)) from e
