"""Multi-stage, multi-seed experiment orchestration."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import ckca
from ..baselines import run_strategy, shrink_perturb, snp_noise_stds, update_memory
from ..nn import TrainingDiverged
from ..stage import StageContext, StageOutcome, StageReport, derive_rng
from ..stream import (Dataset, ReplayMemory, StreamSpec, load_csv, make_blobs, make_stream,
                      stage_train_set, stratified_split)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config
from .reports import emit_reports, summarize

log = logging.getLogger(__name__)

RNG_STREAMS = ("data", "split", "init", "batch", "kmeans", "snp", "llf", "fisher")


class ExperimentAborted(RuntimeError):
    pass


def derive_seed(seed: int, tag: str, *key: int) -> int:
    return int(derive_rng(seed, tag, *key).integers(2**62))


@dataclass
class DataSplit:
    """Training pool and disjoint test set, with ids into the source data."""

    pool: Dataset
    test: Dataset
    pool_ids: np.ndarray
    test_ids: np.ndarray
    chunks: list[np.ndarray]

    @property
    def chunk_sizes(self) -> list[int]:
        return [len(c) for c in self.chunks]


def build_data(cfg: ExperimentConfig, seed: int) -> DataSplit:
    d = cfg.data
    if d.source == "blobs":
        data_seed = d.seed if d.seed is not None else derive_seed(seed, "data")
        full = make_blobs(d.num_classes, d.train_per_class + d.test_per_class, d.dim, d.spread,
                          data_seed, radius=d.radius)
        frac = d.test_per_class / (d.train_per_class + d.test_per_class)
    else:
        full = load_csv(d.csv_path, header=d.csv_header)
        frac = d.test_fraction
    pool_ids, test_ids = stratified_split(full.y, frac, derive_seed(seed, "data", 1))
    pool = full.subset(pool_ids)
    spec = StreamSpec(cfg.stream.num_stages, derive_seed(seed, "split"), cfg.stream.regime,
                      cfg.replay_capacity(len(pool_ids)))
    chunks = make_stream(spec, pool.y)
    return DataSplit(pool, full.subset(test_ids), pool_ids, test_ids, chunks)


@dataclass
class RunState:
    params: object = None
    store: object = None
    fisher: object = None
    memory: ReplayMemory | None = None


def checkpoint_path(out_dir: str | Path, label: str, seed: int, stage: int) -> Path:
    return Path(out_dir) / "checkpoints" / label / f"seed{seed}" / f"stage{stage:02d}.ckpt"


def run_stage(cfg: ExperimentConfig, split: DataSplit, seed: int, stage: int,
              state: RunState) -> StageOutcome:
    regime = cfg.stream.regime
    ctx = StageContext(
        stage=stage, layer_sizes=cfg.layer_sizes(split.pool.dim, _num_classes(split)),
        regime=regime, chunk_sizes=split.chunk_sizes[:stage], seed=seed,
        prev_params=state.params if stage > 1 else None,
        prev_store=state.store, fisher=state.fisher, memory=state.memory)
    train_idx = stage_train_set(split.chunks, stage, regime).indices
    method = cfg.method
    if method.name != "ckca":
        return run_strategy(cfg.strategy, ctx, split.pool, train_idx, cfg.sgd, test=split.test,
                            replay_capacity=cfg.replay_capacity(len(split.pool)))

    start = None
    if method.with_snp and stage > 1:
        s = cfg.strategy
        start = shrink_perturb(state.params, s.snp_shrink, snp_noise_stds(state.params, s.snp_noise_scale),
                               derive_rng(seed, "snp", stage))
    memory = state.memory
    if method.with_replay and memory is None:
        memory = ReplayMemory(cfg.replay_capacity(len(split.pool)))
    replay_idx = memory.indices() if method.with_replay else None
    out = ckca.train_stage(ctx, split.pool, train_idx, cfg.sgd, cfg.ckca, test=split.test,
                           start=start, replay_idx=replay_idx, method=method.label)
    if method.with_replay:
        out.memory = update_memory(memory, out.params, split.pool, train_idx)
    return out


def _num_classes(split: DataSplit) -> int:
    return int(max(split.pool.y.max(), split.test.y.max())) + 1


def run_seed(cfg: ExperimentConfig, seed: int, resume: Checkpoint | None = None,
             on_stage: Callable[[StageReport, StageOutcome], None] | None = None) -> list[StageReport]:
    """All stages of one seeded run; returns reports for the stages it trained."""
    split = build_data(cfg, seed)
    label = cfg.method.label
    state = RunState()
    first = 1
    if resume is not None:
        if resume.method != label:
            raise ValueError(f"checkpoint is for method {resume.method!r}, config runs {label!r}")
        if resume.rng.get("master_seed") != seed:
            raise ValueError("checkpoint was written by a different seed")
        if list(resume.chunk_sizes) != split.chunk_sizes[:resume.stage]:
            raise ValueError("checkpoint chunk sizes do not match this config's stream")
        state = RunState(resume.params, resume.store, resume.fisher, resume.memory)
        first = resume.stage + 1

    reports = []
    for stage in range(first, cfg.stream.num_stages + 1):
        try:
            out = run_stage(cfg, split, seed, stage, state)
        except (TrainingDiverged, FloatingPointError) as exc:
            raise ExperimentAborted(f"{label} seed {seed} stage {stage}: {exc}") from exc
        state = RunState(out.params, out.store, out.fisher,
                         out.memory if out.memory is not None else state.memory)
        reports.append(out.report)
        log.info("%s seed=%d stage=%d acc=%.4f loss=%.4f", label, seed, stage,
                 out.report.acc, out.report.train_loss)
        if cfg.save_checkpoints:
            save_checkpoint(checkpoint_path(cfg.out_dir, label, seed, stage), Checkpoint(
                stage=stage, params=out.params, velocity=out.velocity,
                chunk_sizes=split.chunk_sizes[:stage], method=label,
                rng={"master_seed": seed, "next_stage": stage + 1, "streams": list(RNG_STREAMS)},
                store=out.store, fisher=out.fisher, memory=state.memory))
        if on_stage is not None:
            on_stage(out.report, out)
    return reports


@dataclass
class ExperimentResult:
    reports: list[StageReport]
    summary: dict = field(default_factory=dict)

    def accuracy_matrix(self) -> np.ndarray:
        """(seeds, stages) accuracies for a single-method result."""
        seeds = sorted({r.seed for r in self.reports})
        stages = sorted({r.stage for r in self.reports})
        m = np.full((len(seeds), len(stages)), np.nan)
        for r in self.reports:
            m[seeds.index(r.seed), stages.index(r.stage)] = r.acc
        return m


def _run_seed_job(args):
    cfg, seed = args
    return run_seed(cfg, seed)


def run_experiment(cfg: ExperimentConfig, *, workers: int = 1, resume: str | Path | None = None,
                   write: bool = True) -> ExperimentResult:
    """Run every seed of ``cfg`` and write CSV/JSON reports to ``cfg.out_dir``.

    With ``resume`` only the checkpoint's seed is run, from the following stage.
    """
    out_dir = Path(cfg.out_dir)
    try:
        if resume is not None:
            ck = load_checkpoint(resume)
            reports = run_seed(cfg, int(ck.rng["master_seed"]), resume=ck)
        elif workers > 1 and len(cfg.seeds) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                jobs = pool.map(_run_seed_job, [(cfg, s) for s in cfg.seeds])
                reports = [r for rs in jobs for r in rs]
        else:
            reports = [r for s in cfg.seeds for r in run_seed(cfg, s)]
    except ExperimentAborted as exc:
        if write:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "error.json").write_text(json.dumps({"error": str(exc)}, indent=2) + "\n")
        raise
    result = ExperimentResult(reports, summarize(reports) if reports else {})
    if write and reports:
        emit_reports(reports, out_dir)
        dump_config(cfg, out_dir / "config.yaml")
    return result
