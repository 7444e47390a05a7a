"""Training configuration and seed derivation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

SCHEMES = ("standard", "bcpt", "offline")
MAPPINGS = ("argmax", "injective")
SCHEDULES = ("constant", "cosine")


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for the stream addressed by ``keys``.

    Every random stream in the package is a ``SeedSequence`` spawned from the
    single global seed with a fixed key path, e.g. ``(STREAM_GUIDANCE, it)``.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# key paths for derive_seed
STREAM_INIT = 1
STREAM_BATCHES = 2
STREAM_GUIDANCE = 3
STREAM_OFFLINE = 4
STREAM_EVAL = 5
STREAM_DATA = 6


@dataclass
class TrainConfig:
    scheme: str = "bcpt"
    k: int = 6
    mu: float = 0.999
    alpha: float = 0.1
    bmc_enabled: bool = True
    ocg_enabled: bool = True
    mapping: str = "argmax"
    # False keeps the guided update literal: mu * p without renormalising p
    guided_renormalize: bool = False
    guidance_stride: int = 1
    lr: float = 0.05
    momentum: float = 0.9
    lr_schedule: str = "constant"
    epochs: int = 30
    batch_pixels: int = 512
    scenes_per_batch: int = 2
    normalize_loss: bool = True
    hidden_dim: int = 32
    embed_dim: int = 8
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.scheme not in SCHEMES:
            raise InvalidArgumentError(f"unknown scheme {self.scheme!r}")
        if self.mapping not in MAPPINGS:
            raise InvalidArgumentError(f"unknown mapping {self.mapping!r}")
        if self.lr_schedule not in SCHEDULES:
            raise InvalidArgumentError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.scheme != "standard" and self.k < 2:
            raise InvalidArgumentError("need at least two cluster centers")
        if not 0.0 < self.mu < 1.0:
            raise InvalidArgumentError("mu must lie in (0, 1)")
        if self.alpha < 0:
            raise InvalidArgumentError("alpha must be non-negative")
        if self.lr < 0:
            raise InvalidArgumentError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgumentError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.batch_pixels < 1 or self.scenes_per_batch < 1:
            raise InvalidArgumentError("epochs, batch_pixels and scenes_per_batch out of range")
        if self.guidance_stride < 1:
            raise InvalidArgumentError("guidance stride must be >= 1")
        if self.hidden_dim < 1 or self.embed_dim < 1:
            raise InvalidArgumentError("layer sizes must be positive")

    @property
    def uses_clusters(self) -> bool:
        """Whether background is supervised through cluster pseudo-labels."""
        return self.scheme == "offline" or (self.scheme == "bcpt" and self.bmc_enabled)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)
