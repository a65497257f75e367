"""Flat, versioned run configuration with strict parsing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .augment import AugmentConfig
from .errors import ConfigurationError

CONFIG_VERSION = 1


@dataclass
class RunConfig:
    """Every hyperparameter of the pipeline in one flat document.

    ``mlp_hidden`` and ``temperature`` of 0 mean "derive the default"
    (2 * width and the query descriptor count respectively).
    """

    config_version: int = CONFIG_VERSION
    seed: int = 0
    # data
    dataset: str = ""
    image_side: int = 84
    resize: str = "bilinear"
    # episodes
    ways: int = 5
    shots: int = 1
    train_queries: int = 15
    k: int = 3
    temperature: float = 0.0
    # augmentation geometry
    grid: int = 64
    patch: int = 16
    width: int = 128
    depth: int = 8
    heads: int = 4
    mlp_hidden: int = 0
    bypass: bool = False
    # training schedule
    episodes: int = 300000
    lr: float = 0.001
    halve_every: int = 100000
    val_episodes: int = 100
    val_queries: int = 5
    # outputs
    out_checkpoint: str = ""

    def __post_init__(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigurationError(
                f"unsupported config_version {self.config_version}, "
                f"expected {CONFIG_VERSION}"
            )
        if self.ways < 2:
            raise ConfigurationError("ways must be >= 2")
        for name in ("shots", "train_queries", "k", "episodes", "lr",
                     "halve_every", "image_side"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            grid=self.grid,
            patch=self.patch,
            width=self.width,
            depth=self.depth,
            heads=self.heads,
            mlp_hidden=self.mlp_hidden,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def fingerprint(self) -> str:
        digest = hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        )
        return digest.hexdigest()

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigurationError(
                "unknown config keys: " + ", ".join(sorted(unknown))
            )
        coerced = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            value = raw[f.name]
            expected = {"int": int, "float": float, "str": str, "bool": bool}[f.type]
            if expected is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, expected) or isinstance(value, bool) != (expected is bool):
                raise ConfigurationError(
                    f"config key {f.name!r} expects {expected.__name__}, "
                    f"got {type(value).__name__}"
                )
            coerced[f.name] = value
        return cls(**coerced)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"malformed config file {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config file {path} must hold a JSON object")
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def desk_run_config(**overrides) -> RunConfig:
    """Small-profile defaults sized for minutes-scale runs."""
    base = dict(
        image_side=32,
        train_queries=5,
        grid=8,
        patch=4,
        width=32,
        depth=2,
        episodes=2000,
        halve_every=667,
        val_episodes=50,
        k=3,
    )
    base.update(overrides)
    return RunConfig(**base)
