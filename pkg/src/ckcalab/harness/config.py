"""Experiment configuration, read from YAML.

Every section maps onto a dataclass; unknown keys are rejected so typos do not
silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..baselines import KINDS, StrategyConfig
from ..ckca import CkcaConfig, RegConfig
from ..nn import SgdConfig
from ..stream import NO_ACCESS, REGIMES

METHODS = ("ckca",) + KINDS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "blobs"
    num_classes: int = 10
    train_per_class: int = 500
    test_per_class: int = 100
    dim: int = 20
    spread: float = 0.35
    radius: float = 1.0
    # None: derive the blob layout from each run's master seed
    seed: int | None = None
    csv_path: str | None = None
    csv_header: bool = False
    test_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.source not in ("blobs", "csv"):
            raise ConfigError("data.source must be 'blobs' or 'csv'")
        if self.source == "csv" and not self.csv_path:
            raise ConfigError("data.csv_path is required for csv data")
        if self.source == "blobs" and min(self.num_classes, self.train_per_class,
                                          self.test_per_class, self.dim) < 1:
            raise ConfigError("blob sizes must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("data.test_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class StreamConfig:
    num_stages: int = 10
    regime: str = NO_ACCESS
    # None: 10% of the training pool when replay is active
    replay_capacity: int | None = None

    def __post_init__(self) -> None:
        if self.num_stages < 1:
            raise ConfigError("stream.num_stages must be >= 1")
        if self.regime not in REGIMES:
            raise ConfigError(f"stream.regime must be one of {REGIMES}")
        if self.replay_capacity is not None and self.replay_capacity < 0:
            raise ConfigError("stream.replay_capacity must be >= 0")


@dataclass(frozen=True)
class MethodConfig:
    name: str = "ckca"
    with_snp: bool = False
    with_replay: bool = False

    def __post_init__(self) -> None:
        if self.name not in METHODS:
            raise ConfigError(f"method.name must be one of {METHODS}")
        if (self.with_snp or self.with_replay) and self.name != "ckca":
            raise ConfigError("with_snp / with_replay only combine with method ckca")

    @property
    def label(self) -> str:
        parts = [self.name]
        if self.with_snp:
            parts.append("snp")
        if self.with_replay:
            parts.append("replay")
        return "+".join(parts)

    @property
    def uses_replay(self) -> bool:
        return self.with_replay or self.name == "replay"


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    hidden: tuple[int, ...] = (64, 32)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    ckca: CkcaConfig = field(default_factory=CkcaConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out_dir: str = "runs/default"
    save_checkpoints: bool = True

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden sizes must be positive")
        if self.method.uses_replay and self.stream.regime != NO_ACCESS:
            raise ConfigError("replay needs the no-access regime")
        if self.method.name != "ckca" and self.strategy.kind != self.method.name:
            object.__setattr__(self, "strategy", dataclasses.replace(self.strategy, kind=self.method.name))

    def replay_capacity(self, pool_size: int) -> int:
        if not self.method.uses_replay:
            return 0
        if self.stream.replay_capacity is not None:
            return self.stream.replay_capacity
        return max(1, pool_size // 10)

    def layer_sizes(self, input_dim: int, num_classes: int) -> list[int]:
        return [input_dim, *self.hidden, num_classes]

    def to_dict(self) -> dict[str, Any]:
        ck = self.ckca
        return {
            "data": dataclasses.asdict(self.data),
            "stream": dataclasses.asdict(self.stream),
            "model": {"hidden": list(self.hidden)},
            "sgd": dataclasses.asdict(self.sgd),
            "method": dataclasses.asdict(self.method),
            "ckca": {"lam": ck.reg.lam, "k": ck.reg.k, "temperature": ck.temperature,
                     "kd": ck.kd, "featreg": ck.featreg, "kmeans_iters": ck.kmeans_iters,
                     "kmeans_tol": ck.kmeans_tol},
            "strategy": {k: v for k, v in dataclasses.asdict(self.strategy).items() if k != "kind"},
            "seeds": list(self.seeds),
            "output": {"dir": self.out_dir, "checkpoints": self.save_checkpoints},
        }


def _build(cls, section: str, values: dict[str, Any] | None, **fixed):
    values = dict(values or {})
    names = {f.name for f in dataclasses.fields(cls)} - set(fixed)
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    try:
        return cls(**values, **fixed)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    raw = dict(raw or {})
    known = {"data", "stream", "model", "sgd", "method", "ckca", "strategy", "seeds", "output"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")

    model = dict(raw.get("model") or {})
    if set(model) - {"hidden"}:
        raise ConfigError(f"unknown key(s) in [model]: {sorted(set(model) - {'hidden'})}")
    ck = dict(raw.get("ckca") or {})
    reg = _build(RegConfig, "ckca", {k: ck.pop(k) for k in ("lam", "k") if k in ck})
    method = raw.get("method") or {}
    if isinstance(method, str):
        method = {"name": method}
    output = dict(raw.get("output") or {})
    if set(output) - {"dir", "checkpoints"}:
        raise ConfigError(f"unknown key(s) in [output]: {sorted(set(output) - {'dir', 'checkpoints'})}")
    method_cfg = _build(MethodConfig, "method", method)
    kind = method_cfg.name if method_cfg.name in KINDS else "warm"

    kwargs: dict[str, Any] = dict(
        data=_build(DataConfig, "data", raw.get("data")),
        stream=_build(StreamConfig, "stream", raw.get("stream")),
        sgd=_build(SgdConfig, "sgd", raw.get("sgd")),
        method=method_cfg,
        ckca=_build(CkcaConfig, "ckca", ck, reg=reg),
        strategy=_build(StrategyConfig, "strategy", raw.get("strategy"), kind=kind),
    )
    if "hidden" in model:
        kwargs["hidden"] = tuple(int(h) for h in model["hidden"])
    if "seeds" in raw:
        seeds = raw["seeds"]
        kwargs["seeds"] = tuple(int(s) for s in ([seeds] if isinstance(seeds, int) else seeds))
    if "dir" in output:
        kwargs["out_dir"] = str(output["dir"])
    if "checkpoints" in output:
        kwargs["save_checkpoints"] = bool(output["checkpoints"])
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw or {})


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def with_overrides(cfg: ExperimentConfig, *, out: str | None = None, seeds=None,
                   method: str | None = None, regime: str | None = None,
                   stages: int | None = None) -> ExperimentConfig:
    """Apply command-line overrides on top of a loaded config."""
    raw = cfg.to_dict()
    if out is not None:
        raw["output"]["dir"] = out
    if seeds is not None:
        raw["seeds"] = list(seeds)
    if method is not None:
        raw["method"]["name"] = method
        if method != "ckca":
            raw["method"]["with_snp"] = raw["method"]["with_replay"] = False
    if regime is not None:
        raw["stream"]["regime"] = regime
    if stages is not None:
        raw["stream"]["num_stages"] = stages
    return from_dict(raw)
