"""Competing strategies: scratch, warm start, shrink-and-perturb, LLF, EWC, replay.

All of them share the same SGD loop and batching stream as the CKCA trainer;
they only differ in the starting point, an extra penalty, or extra data.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .ckca import evaluate, fit_stage, stored_samples
from .nn import ModelParams, SgdConfig
from .stage import StageContext, StageOutcome, StageReport, derive_rng
from .stream import FULL_ACCESS, Dataset, ReplayMemory, replay_update

KINDS = ("scratch", "warm", "snp", "llf", "ewc", "replay")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "warm"
    snp_shrink: float = 0.4
    # noise std as a multiple of each layer's init std
    snp_noise_scale: float = 0.01
    llf_reinit_from_layer: int | None = None
    ewc_lambda: float = 100.0
    fisher_samples: int = 200

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")
        if not 0.0 < self.snp_shrink <= 1.0:
            raise ValueError("snp_shrink must lie in (0, 1]")
        if self.snp_noise_scale < 0 or self.ewc_lambda < 0:
            raise ValueError("noise scale and ewc_lambda must be >= 0")
        if self.fisher_samples < 1:
            raise ValueError("fisher_samples must be >= 1")


def shrink_perturb(params: ModelParams, shrink: float, noise_std: float | Sequence[float],
                   seed) -> ModelParams:
    """``w <- shrink * w + N(0, std^2)`` on every weight and bias.

    ``noise_std`` is either one value or one per layer.
    """
    if not 0.0 < shrink <= 1.0:
        raise ValueError("shrink must lie in (0, 1]")
    stds = [noise_std] * params.num_layers if np.isscalar(noise_std) else list(noise_std)
    if len(stds) != params.num_layers or any(s < 0 for s in stds):
        raise ValueError("need one non-negative noise std per layer")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for w, b, std in zip(params.weights, params.biases, stds):
        ws.append(shrink * w + rng.normal(0.0, std, size=w.shape) if std > 0 else shrink * w)
        bs.append(shrink * b + rng.normal(0.0, std, size=b.shape) if std > 0 else shrink * b)
    return ModelParams(ws, bs)


def snp_noise_stds(params: ModelParams, scale: float) -> list[float]:
    return [scale * nn.init_std(w.shape[1]) for w in params.weights]


def llf_reinit(params: ModelParams, from_layer: int, seed) -> ModelParams:
    """Fresh initialisation for layers ``from_layer`` onwards; earlier ones copied."""
    if not 0 <= from_layer < params.num_layers:
        raise IndexError(f"from_layer {from_layer} outside 0..{params.num_layers - 1}")
    fresh = nn.init_params(params.layer_sizes, seed)
    out = params.copy()
    for j in range(from_layer, params.num_layers):
        out.weights[j] = fresh.weights[j]
        out.biases[j] = fresh.biases[j]
    return out


def default_llf_layer(num_layers: int) -> int:
    """Top half of the layers (rounded down, at least the classifier)."""
    return min(num_layers - 1, num_layers - num_layers // 2)


@dataclass
class FisherDiag:
    values: ModelParams
    anchor: ModelParams

    def __post_init__(self) -> None:
        if self.values.layer_sizes != self.anchor.layer_sizes:
            raise ValueError("fisher and anchor shapes differ")


def fisher_estimate(params: ModelParams, x: np.ndarray, y: np.ndarray,
                    fisher_samples: int, seed) -> FisherDiag:
    """Diagonal empirical Fisher: mean squared per-sample CE gradient."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("need data to estimate the Fisher information")
    rng = np.random.default_rng(seed)
    m = min(fisher_samples, len(y))
    picks = np.sort(rng.choice(len(y), size=m, replace=False))
    acc = params.zeros_like()
    for i in picks:
        trace = nn.forward(params, x[i])
        _, dlogits = nn.softmax_ce(trace.logits, int(y[i]))
        g = nn.backward(params, trace, dlogits)
        acc = acc.combine(g, lambda a, b: a + b * b)
    return FisherDiag(acc.map(lambda a: a / m), params.copy())


def ewc_penalty(params: ModelParams, fisher: FisherDiag, ewc_lambda: float):
    if params.layer_sizes != fisher.anchor.layer_sizes:
        raise ValueError("parameter shapes do not match the Fisher anchor")
    diff = params.combine(fisher.anchor, np.subtract)
    loss = 0.5 * ewc_lambda * sum(float((f * d * d).sum())
                                  for f, d in zip(fisher.values.arrays(), diff.arrays()))
    grad = diff.combine(fisher.values, lambda d, f: ewc_lambda * f * d)
    return loss, grad


def validate(strategy: StrategyConfig, regime: str) -> None:
    if strategy.kind == "replay" and regime == FULL_ACCESS:
        raise ValueError("replay is only meaningful when old data is unavailable")


def feature_fn(params: ModelParams, pool: Dataset):
    return lambda idx: nn.forward(params, pool.x[np.asarray(idx, dtype=np.int64)]).feature


def update_memory(memory: ReplayMemory, params: ModelParams, pool: Dataset,
                  train_idx: np.ndarray) -> ReplayMemory:
    train_idx = np.asarray(train_idx, dtype=np.int64)
    return replay_update(memory, train_idx, pool.y[train_idx], feature_fn(params, pool))


def run_strategy(strategy: StrategyConfig, ctx: StageContext, pool: Dataset,
                 train_idx: np.ndarray, sgd: SgdConfig, *, test: Dataset | None = None,
                 replay_capacity: int = 0) -> StageOutcome:
    """Train one stage with a baseline strategy.

    Stage 1 is the same fresh-initialised CE run for every strategy.  EWC and
    replay return their updated Fisher / memory in the outcome.
    """
    validate(strategy, ctx.regime)
    t0 = time.perf_counter()
    kind = strategy.kind
    train_idx = np.asarray(train_idx, dtype=np.int64)

    if ctx.stage == 1 or kind == "scratch":
        start = nn.init_params(ctx.layer_sizes, derive_rng(ctx.seed, "init", ctx.stage))
    else:
        if ctx.prev_params is None:
            raise ValueError(f"stage {ctx.stage} needs the previous model")
        prev = ctx.prev_params
        if kind == "snp":
            start = shrink_perturb(prev, strategy.snp_shrink,
                                   snp_noise_stds(prev, strategy.snp_noise_scale),
                                   derive_rng(ctx.seed, "snp", ctx.stage))
        elif kind == "llf":
            layer = strategy.llf_reinit_from_layer
            if layer is None:
                layer = default_llf_layer(prev.num_layers)
            start = llf_reinit(prev, layer, derive_rng(ctx.seed, "llf", ctx.stage))
        else:
            start = prev.copy()

    ewc = None
    if kind == "ewc" and ctx.fisher is not None and ctx.stage > 1:
        ewc = (ctx.fisher, strategy.ewc_lambda)

    memory = ctx.memory if ctx.memory is not None else ReplayMemory(replay_capacity)
    all_idx = train_idx
    if kind == "replay" and len(memory):
        all_idx = np.concatenate([train_idx, memory.indices()])

    result, _ = fit_stage(start, pool.x[all_idx], pool.y[all_idx], sgd,
                          derive_rng(ctx.seed, "batch", ctx.stage), ewc=ewc)

    fisher = new_memory = None
    if kind == "ewc":
        fisher = fisher_estimate(result.params, pool.x[train_idx], pool.y[train_idx],
                                 strategy.fisher_samples, derive_rng(ctx.seed, "fisher", ctx.stage))
    if kind == "replay":
        new_memory = update_memory(memory, result.params, pool, train_idx)

    report = StageReport(
        method=kind, seed=ctx.seed, stage=ctx.stage, acc=evaluate(result.params, test),
        train_loss=result.final_loss, epochs=sgd.epochs,
        samples_processed=sgd.epochs * len(all_idx), stored_samples=stored_samples(ctx, all_idx),
        wall_time=time.perf_counter() - t0)
    return StageOutcome(result.params, result.velocity, report, fisher=fisher, memory=new_memory)


