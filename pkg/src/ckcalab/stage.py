"""Types shared by every per-stage trainer."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from .nn import ModelParams

if TYPE_CHECKING:
    from .baselines import FisherDiag
    from .ckca import CentroidStore
    from .stream import ReplayMemory


def derive_rng(seed: int, tag: str, *key: int) -> np.random.Generator:
    """Independent generator for one (master seed, purpose, stage...) combination.

    Streams with different tags never share state, so changing how one of them
    is consumed leaves the others untouched.
    """
    spawn_key = (zlib.crc32(tag.encode()),) + tuple(int(k) for k in key)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key))


@dataclass
class StageContext:
    """Everything a stage trainer may read about the past.

    ``chunk_sizes`` holds |D_1|..|D_i| for the current stage ``i``.
    """

    stage: int
    layer_sizes: list[int]
    regime: str
    chunk_sizes: list[int]
    seed: int = 0
    prev_params: ModelParams | None = None
    prev_store: "CentroidStore | None" = None
    fisher: "FisherDiag | None" = None
    memory: "ReplayMemory | None" = None

    def __post_init__(self) -> None:
        if self.stage < 1 or len(self.chunk_sizes) != self.stage:
            raise ValueError("chunk_sizes must list one size per stage up to the current one")
        if self.stage == 1 and self.prev_params is not None:
            raise ValueError("stage 1 has no previous model")


@dataclass
class StageReport:
    method: str
    seed: int
    stage: int
    acc: float
    train_loss: float
    epochs: int
    samples_processed: int
    stored_samples: int
    wall_time: float = 0.0
    featreg_skips: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.acc <= 1.0 or np.isnan(self.acc)):
            raise ValueError(f"accuracy {self.acc} outside [0, 1]")


@dataclass
class StageOutcome:
    params: ModelParams
    velocity: ModelParams
    report: StageReport
    store: "CentroidStore | None" = None
    fisher: "FisherDiag | None" = None
    memory: "ReplayMemory | None" = None
    extra: dict[str, Any] = field(default_factory=dict)
