"""Data streams: datasets, even stratified chunking, access regimes, replay memory."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .nn import DTYPE

NO_ACCESS = "no-access"
FULL_ACCESS = "full-access"
REGIMES = (NO_ACCESS, FULL_ACCESS)


@dataclass
class Dataset:
    """Features ``x`` (n, d) and integer labels ``y`` (n,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=DTYPE)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError(f"bad dataset shapes x={self.x.shape} y={self.y.shape}")
        if not np.isfinite(self.x).all():
            raise ValueError("dataset features must be finite")
        if (self.y < 0).any():
            raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx])


def make_blobs(num_classes: int, per_class: int, dim: int, spread: float, seed,
               radius: float = 1.0) -> Dataset:
    """Isotropic Gaussian blobs, one per class, with means on a sphere.

    The means depend only on ``(num_classes, dim, radius, seed)``; samples are
    grouped by class (class 0 first).
    """
    if min(num_classes, per_class, dim) < 1 or spread < 0:
        raise ValueError("num_classes, per_class, dim must be positive and spread >= 0")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, dim))
    means *= radius / np.linalg.norm(means, axis=1, keepdims=True)
    noise = rng.normal(size=(num_classes, per_class, dim))
    x = (means[:, None, :] + spread * noise).reshape(-1, dim)
    y = np.repeat(np.arange(num_classes), per_class)
    return Dataset(x, y)


def load_csv(path: str | Path, header: bool = False) -> Dataset:
    """Read ``feature,...,feature,label`` rows."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if header:
            next(reader, None)
        for lineno, row in enumerate(reader, start=2 if header else 1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise ValueError(f"{path}:{lineno}: need at least one feature and a label")
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no samples")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError(f"{path}: rows have differing column counts")
    x = np.array([[float(c) for c in r[:-1]] for r in rows], dtype=DTYPE)
    y = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    return Dataset(x, y)


def stratified_split(y: np.ndarray, fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into (rest, held_out) taking ``fraction`` of each class."""
    rng = np.random.default_rng(seed)
    rest, held = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        k = int(round(fraction * len(idx)))
        held.append(idx[:k])
        rest.append(idx[k:])
    return np.sort(np.concatenate(rest)), np.sort(np.concatenate(held))


@dataclass(frozen=True)
class StreamSpec:
    num_stages: int = 10
    split_seed: int = 0
    regime: str = NO_ACCESS
    replay_capacity: int = 0

    def __post_init__(self) -> None:
        if self.num_stages < 1:
            raise ValueError("num_stages must be >= 1")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if self.replay_capacity < 0:
            raise ValueError("replay_capacity must be >= 0")


def make_stream(spec: StreamSpec, data: Dataset | np.ndarray) -> list[np.ndarray]:
    """Partition sample indices into ``spec.num_stages`` even chunks.

    ``data`` is a ``Dataset`` or just its label array.

    Shuffles within each class, lays the classes end to end and deals the
    result round-robin, so chunk sizes differ by at most one and every class is
    spread over the chunks as evenly as its count allows.
    """
    labels = data.y if isinstance(data, Dataset) else np.asarray(data)
    n, s = len(labels), spec.num_stages
    if n == 0:
        raise ValueError("dataset is empty")
    if s > n:
        raise ValueError(f"cannot split {n} samples into {s} stages")
    rng = np.random.default_rng(spec.split_seed)
    classes = np.unique(labels)
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == c))
                            for c in rng.permutation(classes)])
    return [rng.permutation(order[k::s]) for k in range(s)]


@dataclass(frozen=True)
class StageDataset:
    stage: int
    indices: np.ndarray
    cumulative: bool

    def __len__(self) -> int:
        return len(self.indices)


def stage_train_set(chunks: Sequence[np.ndarray], i: int, regime: str) -> StageDataset:
    """Training indices for 1-based stage ``i`` under ``regime``."""
    if not 1 <= i <= len(chunks):
        raise IndexError(f"stage {i} outside 1..{len(chunks)}")
    if regime == NO_ACCESS:
        return StageDataset(i, np.asarray(chunks[i - 1]), False)
    if regime == FULL_ACCESS:
        return StageDataset(i, np.concatenate(chunks[:i]), True)
    raise ValueError(f"unknown regime {regime!r}")


def herding_select(features: np.ndarray, m: int) -> list[int]:
    """Greedy herding: positions of ``m`` rows whose running mean tracks the class mean.

    Ties go to the lowest position.
    """
    feats = np.asarray(features, dtype=DTYPE)
    n = len(feats)
    if n == 0:
        raise ValueError("cannot select exemplars from an empty class")
    if not 0 <= m <= n:
        raise ValueError(f"m={m} outside [0, {n}]")
    target = feats.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros_like(target)
    available = np.ones(n, dtype=bool)
    for k in range(1, m + 1):
        cand = (running[None, :] + feats) / k
        dist = np.linalg.norm(target[None, :] - cand, axis=1)
        dist[~available] = np.inf
        pick = int(np.argmin(dist))
        chosen.append(pick)
        available[pick] = False
        running += feats[pick]
    return chosen


def _herding_continue(feats: np.ndarray, prior: np.ndarray, m: int) -> list[int]:
    """Herding over ``feats`` that starts from already-chosen ``prior`` rows.

    The target is the mean of prior and candidates together.
    """
    target = np.concatenate([prior, feats]).mean(axis=0)
    running = prior.sum(axis=0) if len(prior) else np.zeros(feats.shape[1])
    chosen: list[int] = []
    available = np.ones(len(feats), dtype=bool)
    for k in range(len(prior) + 1, len(prior) + m + 1):
        dist = np.linalg.norm(target[None, :] - (running[None, :] + feats) / k, axis=1)
        dist[~available] = np.inf
        pick = int(np.argmin(dist))
        chosen.append(pick)
        available[pick] = False
        running = running + feats[pick]
    return chosen


@dataclass
class ReplayMemory:
    """Class-balanced exemplar store holding indices into the training pool."""

    capacity: int
    exemplars: dict[int, list[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.exemplars.values())

    def indices(self) -> np.ndarray:
        out = [i for c in sorted(self.exemplars) for i in self.exemplars[c]]
        return np.asarray(out, dtype=np.int64)


FeatureFn = Callable[[np.ndarray], np.ndarray]


def replay_update(memory: ReplayMemory, indices: np.ndarray, labels: np.ndarray,
                  feature_fn: FeatureFn) -> ReplayMemory:
    """Fold a stage's samples into the memory.

    ``indices`` address the training pool, ``labels`` are their classes and
    ``feature_fn(indices)`` returns their features.  Every class gets a quota
    of ``capacity // classes_seen``; stored lists are cut to that prefix and
    classes with spare room are topped up from the new samples by herding.
    """
    if memory.capacity <= 0:
        return ReplayMemory(memory.capacity)
    indices = np.asarray(indices, dtype=np.int64)
    labels = np.asarray(labels)
    seen = set(memory.exemplars) | {int(c) for c in np.unique(labels)}
    quota = memory.capacity // len(seen)
    updated: dict[int, list[int]] = {}
    for c in sorted(seen):
        kept = list(memory.exemplars.get(c, []))[:quota]
        stored = set(kept)
        fresh = np.array([i for i in indices[labels == c] if int(i) not in stored], dtype=np.int64)
        room = min(quota - len(kept), len(fresh))
        if room > 0:
            prior = feature_fn(np.asarray(kept, dtype=np.int64)) if kept else np.zeros((0, 0))
            feats = feature_fn(fresh)
            if kept:
                picks = _herding_continue(feats, prior, room)
            else:
                picks = herding_select(feats, room)
            kept += [int(fresh[p]) for p in picks]
        if kept:
            updated[c] = kept
    return ReplayMemory(memory.capacity, updated)
