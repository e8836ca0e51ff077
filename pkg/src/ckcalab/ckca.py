"""Warm-started stage training with feature-centroid regularisation and adaptive distillation.

Per stage the model starts from the previous checkpoint, is trained with
cross entropy plus

* a pull of each sample's penultimate feature towards the nearest stored
  centroid of its class (centroids come from K-means on the previous
  checkpoint's features), and
* when old data is gone, distillation from the previous checkpoint whose
  strength starts at the old-data fraction and decays by cosine to 0.5,

and finally stores fresh class centroids for the next stage.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import nn
from .nn import DTYPE, ModelParams, SgdConfig
from .stage import StageContext, StageOutcome, StageReport, derive_rng
from .stream import FULL_ACCESS, NO_ACCESS, Dataset

EPS_NORM = 1e-8


# ---------------------------------------------------------------------------
# K-means


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    counts: np.ndarray
    n_iter: int

    @property
    def k(self) -> int:
        return len(self.centroids)

    def sse(self, points: np.ndarray) -> float:
        return float(((np.asarray(points) - self.centroids[self.labels]) ** 2).sum())


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0.0:
            break
        nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].copy()


def kmeans(features: np.ndarray, k: int, seed=0, max_iters: int = 100,
           tol: float = 1e-10) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    ``k`` is capped at the number of distinct points, so coincident inputs
    collapse into one centroid.  Returned centroids are exactly the means of
    their assigned points.
    """
    pts = np.asarray(features, dtype=DTYPE)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("features must be a non-empty 2-D array")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, len(np.unique(pts, axis=0)))
    rng = np.random.default_rng(seed)
    centers = _plusplus(pts, k, rng)
    k = len(centers)

    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        labels = np.argmin(_sq_dists(pts, centers), axis=1)
        new = np.empty_like(centers)
        for j in range(k):
            members = pts[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                # re-seed from the point worst served by its current centre
                err = ((pts - centers[labels]) ** 2).sum(axis=1)
                far = int(np.argmax(err))
                new[j] = pts[far]
                labels[far] = j
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        if shift < tol:
            break

    labels = np.argmin(_sq_dists(pts, centers), axis=1)
    used = np.unique(labels)
    centers = np.stack([pts[labels == j].mean(axis=0) for j in used])
    labels = np.searchsorted(used, labels)
    counts = np.bincount(labels, minlength=len(used)).astype(np.int64)
    return KMeansResult(centers, labels, counts, n_iter)


# ---------------------------------------------------------------------------
# Centroids and the feature regulariser


@dataclass(frozen=True)
class RegConfig:
    lam: float = 0.1
    k: int = 1

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.k < 1:
            raise ValueError("K must be >= 1")


@dataclass
class CentroidStore:
    k: int
    feature_dim: int
    centroids: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, np.ndarray] = field(default_factory=dict)

    def classes(self) -> list[int]:
        return sorted(self.centroids)

    def same_as(self, other: "CentroidStore") -> bool:
        if (self.k, self.feature_dim, self.classes()) != (other.k, other.feature_dim, other.classes()):
            return False
        return all(self.centroids[c].tobytes() == other.centroids[c].tobytes()
                   and self.counts[c].tobytes() == other.counts[c].tobytes()
                   for c in self.classes())


def compute_centroids(params: ModelParams, x: np.ndarray, y: np.ndarray,
                      reg: RegConfig, seed: int = 0, max_iters: int = 100,
                      tol: float = 1e-10) -> CentroidStore:
    """Per-class K-means of penultimate features."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("need at least one sample")
    feats = nn.forward(params, x).feature
    store = CentroidStore(reg.k, params.feature_dim)
    for c in np.unique(y):
        res = kmeans(feats[y == c], reg.k, seed=[int(seed), int(c)], max_iters=max_iters, tol=tol)
        store.centroids[int(c)] = res.centroids
        store.counts[int(c)] = res.counts
    return store


def nearest_centroid(feature: np.ndarray, centroids: np.ndarray) -> int:
    return int(np.argmin(np.linalg.norm(centroids - feature, axis=1)))


def featreg_loss(feature: np.ndarray, y, store: CentroidStore):
    """L2 distance from the feature to the closest centroid of its class.

    Single ``(F,)`` feature with int label -> ``(loss, dfeature)``.  Batched
    ``(n, F)`` input -> ``(losses, dfeatures, skipped)`` where ``skipped``
    counts samples whose class has no centroid (they contribute zero).
    """
    g = np.asarray(feature, dtype=DTYPE)
    single = g.ndim == 1
    g2 = g[None, :] if single else g
    labels = np.atleast_1d(np.asarray(y))
    if g2.shape[1] != store.feature_dim:
        raise ValueError(f"feature dim {g2.shape[1]} != centroid dim {store.feature_dim}")
    losses = np.zeros(len(g2))
    grads = np.zeros_like(g2)
    skipped = 0
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        cents = store.centroids.get(int(c))
        if cents is None or len(cents) == 0:
            skipped += len(rows)
            continue
        diff_all = g2[rows, None, :] - cents[None, :, :]
        dist_all = np.sqrt((diff_all ** 2).sum(axis=2))
        pick = np.argmin(dist_all, axis=1)
        diff = diff_all[np.arange(len(rows)), pick]
        dist = dist_all[np.arange(len(rows)), pick]
        losses[rows] = dist
        live = dist >= EPS_NORM
        grads[rows[live]] = diff[live] / dist[live, None]
    if single:
        return float(losses[0]), grads[0]
    return losses, grads, skipped


# ---------------------------------------------------------------------------
# Distillation


def kd_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, temperature: float):
    """Temperature-scaled KL(teacher || student) times T^2, with its student gradient.

    Per-sample values for batched input.
    """
    s = np.asarray(student_logits, dtype=DTYPE)
    t = np.asarray(teacher_logits, dtype=DTYPE)
    if s.shape != t.shape:
        raise ValueError(f"student {s.shape} and teacher {t.shape} logits differ in shape")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if not (np.isfinite(s).all() and np.isfinite(t).all()):
        raise ValueError("logits must be finite")
    log_ps = nn.log_softmax(s / temperature)
    log_pt = nn.log_softmax(t / temperature)
    pt = np.exp(log_pt)
    loss = temperature ** 2 * (pt * (log_pt - log_ps)).sum(axis=-1)
    grad = temperature * (np.exp(log_ps) - pt)
    if s.ndim == 1:
        return float(loss), grad
    return loss, grad


def alpha_init(chunk_sizes: Sequence[int]) -> float:
    """Share of the data seen so far that belongs to earlier stages."""
    sizes = [int(s) for s in chunk_sizes]
    if len(sizes) < 2:
        raise ValueError("initial distillation strength needs a previous stage")
    if any(s <= 0 for s in sizes):
        raise ValueError("chunk sizes must be positive")
    return float(Fraction(sum(sizes[:-1]), sum(sizes)))


@dataclass(frozen=True)
class DistillationSchedule:
    alpha0: float
    total_epochs: int
    temperature: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha0 < 1.0:
            raise ValueError("alpha0 must lie in [0, 1)")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


def alpha_at(schedule: DistillationSchedule, t: float) -> float:
    """Cosine decay from alpha0 at t=0 to 0.5 at t=T."""
    T = schedule.total_epochs
    if not 0 <= t <= T:
        raise ValueError(f"epoch {t} outside [0, {T}]")
    a0 = schedule.alpha0
    # same cosine curve written around its floor, so both ends come out exact:
    # a0 - 0.5 is exact for a0 in [0.25, 1] and cos(pi) is exactly -1
    return 0.5 + (a0 - 0.5) * (1.0 + math.cos(t / T * math.pi)) / 2


# ---------------------------------------------------------------------------
# Assembled losses


@dataclass
class LossParts:
    loss: float
    grad: ModelParams
    featreg_skips: int = 0


def assembled_loss(params: ModelParams, x: np.ndarray, y: np.ndarray, *,
                   teacher_logits: np.ndarray | None = None, alpha: float = 0.0,
                   temperature: float = 2.0, store: CentroidStore | None = None,
                   lam: float = 0.0, ewc=None) -> LossParts:
    """Batch-mean CE, optionally blended with KD, plus FeatReg and an EWC term.

    Terms whose switch is off are never evaluated, so a run with everything
    disabled follows plain cross entropy to the last bit.
    """
    n = len(y)
    trace = nn.forward(params, x)
    ce, dce = nn.softmax_ce(trace.out, y)
    if teacher_logits is not None:
        kd, dkd = kd_loss(trace.out, teacher_logits, temperature)
        loss = float(((1.0 - alpha) * ce + alpha * kd).mean())
        dlogits = ((1.0 - alpha) * dce + alpha * dkd) / n
    else:
        loss = float(ce.mean())
        dlogits = dce / n
    dfeature = None
    skips = 0
    if store is not None and lam > 0.0:
        fr, dfr, skips = featreg_loss(trace.inputs[-1], y, store)
        loss += lam * float(fr.mean())
        dfeature = lam * dfr / n
    grad = nn.backward(params, trace, dlogits, dfeature)
    if ewc is not None:
        fisher, ewc_lambda = ewc
        from .baselines import ewc_penalty

        pen, dpen = ewc_penalty(params, fisher, ewc_lambda)
        loss += pen
        grad = grad.combine(dpen, np.add)
    return LossParts(loss, grad, skips)


def total_loss_full_access(params: ModelParams, x, y, store: CentroidStore | None,
                           reg: RegConfig) -> tuple[float, ModelParams]:
    parts = assembled_loss(params, x, y, store=store, lam=reg.lam)
    return parts.loss, parts.grad


def total_loss_no_access(params: ModelParams, teacher: ModelParams, x, y,
                         store: CentroidStore | None, reg: RegConfig, alpha: float,
                         temperature: float) -> tuple[float, ModelParams]:
    teacher_logits = nn.forward(teacher, x).out
    parts = assembled_loss(params, x, y, teacher_logits=teacher_logits, alpha=alpha,
                           temperature=temperature, store=store, lam=reg.lam)
    return parts.loss, parts.grad


# ---------------------------------------------------------------------------
# Stage trainer


@dataclass(frozen=True)
class CkcaConfig:
    """``kd``: "auto" distils only when old data is unavailable; "on"/"off" force it."""

    reg: RegConfig = field(default_factory=RegConfig)
    temperature: float = 2.0
    kd: str = "auto"
    featreg: bool = True
    kmeans_iters: int = 100
    kmeans_tol: float = 1e-10

    def __post_init__(self) -> None:
        if self.kd not in ("auto", "on", "off"):
            raise ValueError("kd must be auto, on or off")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    def uses_kd(self, regime: str) -> bool:
        return self.kd == "on" or (self.kd == "auto" and regime == NO_ACCESS)


def fit_stage(start: ModelParams, x: np.ndarray, y: np.ndarray, sgd: SgdConfig,
              rng: np.random.Generator, *, teacher: ModelParams | None = None,
              alpha_schedule: DistillationSchedule | None = None,
              store: CentroidStore | None = None, lam: float = 0.0, ewc=None):
    """Run one stage of SGD; returns (FitResult, featreg skip count)."""
    teacher_logits = nn.forward(teacher, x).out if teacher is not None else None
    temperature = alpha_schedule.temperature if alpha_schedule is not None else 1.0
    skips = 0

    def loss_fn(params, idx, epoch):
        nonlocal skips
        alpha = alpha_at(alpha_schedule, epoch) if teacher_logits is not None else 0.0
        parts = assembled_loss(
            params, x[idx], y[idx],
            teacher_logits=None if teacher_logits is None else teacher_logits[idx],
            alpha=alpha, temperature=temperature, store=store, lam=lam, ewc=ewc)
        skips += parts.featreg_skips
        return parts.loss, parts.grad

    return nn.fit(start, len(y), loss_fn, sgd, rng), skips


def evaluate(params: ModelParams, test: Dataset | None) -> float:
    return float("nan") if test is None else nn.accuracy(params, test.x, test.y)


def train_stage(ctx: StageContext, pool: Dataset, train_idx: np.ndarray, sgd: SgdConfig,
                cfg: CkcaConfig = CkcaConfig(), *, test: Dataset | None = None,
                start: ModelParams | None = None, replay_idx: np.ndarray | None = None,
                method: str = "ckca") -> StageOutcome:
    """Train stage ``ctx.stage`` and compute the centroids for the next one.

    ``start`` overrides the warm-start initialisation (e.g. shrink-and-perturb);
    ``replay_idx`` adds stored exemplars to the training set.  Stage 1 is plain
    cross entropy from a fresh initialisation.
    """
    t0 = time.perf_counter()
    train_idx = np.asarray(train_idx, dtype=np.int64)
    all_idx = train_idx if replay_idx is None or len(replay_idx) == 0 else \
        np.concatenate([train_idx, np.asarray(replay_idx, dtype=np.int64)])
    x, y = pool.x[all_idx], pool.y[all_idx]

    teacher = schedule = store = None
    lam = 0.0
    if ctx.stage == 1:
        init = nn.init_params(ctx.layer_sizes, derive_rng(ctx.seed, "init", 1))
    else:
        if ctx.prev_params is None:
            raise ValueError(f"stage {ctx.stage} needs the previous model")
        init = ctx.prev_params.copy()
        if cfg.uses_kd(ctx.regime) and sgd.epochs > 0:
            teacher = ctx.prev_params
            schedule = DistillationSchedule(alpha_init(ctx.chunk_sizes), sgd.epochs, cfg.temperature)
        if cfg.featreg and ctx.prev_store is not None:
            store, lam = ctx.prev_store, cfg.reg.lam
    if start is not None:
        init = start

    result, skips = fit_stage(init, x, y, sgd, derive_rng(ctx.seed, "batch", ctx.stage),
                              teacher=teacher, alpha_schedule=schedule, store=store, lam=lam)
    new_store = compute_centroids(result.params, pool.x[train_idx], pool.y[train_idx], cfg.reg,
                                  seed=int(derive_rng(ctx.seed, "kmeans", ctx.stage).integers(2**31)),
                                  max_iters=cfg.kmeans_iters, tol=cfg.kmeans_tol)
    report = StageReport(
        method=method, seed=ctx.seed, stage=ctx.stage, acc=evaluate(result.params, test),
        train_loss=result.final_loss, epochs=sgd.epochs,
        samples_processed=sgd.epochs * len(all_idx), stored_samples=stored_samples(ctx, all_idx),
        wall_time=time.perf_counter() - t0, featreg_skips=skips)
    return StageOutcome(result.params, result.velocity, report, store=new_store)


def stored_samples(ctx: StageContext, train_idx: np.ndarray) -> int:
    """Samples that must be kept on disk to run this stage."""
    if ctx.regime == FULL_ACCESS:
        return int(sum(ctx.chunk_sizes))
    return int(len(train_idx))
