"""Small multilayer perceptron with hand-written gradients and SGD.

The network is a chain of affine layers with ReLU between them.  The
activation that enters the last affine layer is the *feature* used by the
feature regulariser; ``backward`` accepts a gradient for it directly so that
feature-space losses can be attached without touching this module.

Everything is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class TrainingDiverged(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {j}: weight {w.shape} and bias {b.shape} disagree")
            if j and w.shape[1] != self.weights[j - 1].shape[0]:
                raise ValueError(f"layer {j}: in-dim {w.shape[1]} != previous out-dim")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "ModelParams":
        return ModelParams([np.zeros_like(w) for w in self.weights],
                           [np.zeros_like(b) for b in self.biases])

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ModelParams":
        return ModelParams([fn(w) for w in self.weights], [fn(b) for b in self.biases])

    def combine(self, other: "ModelParams", fn) -> "ModelParams":
        return ModelParams([fn(a, b) for a, b in zip(self.weights, other.weights)],
                           [fn(a, b) for a, b in zip(self.biases, other.biases)])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        """Return params of the same shapes filled from ``vec``."""
        vec = np.asarray(vec, dtype=DTYPE)
        if vec.size != self.size:
            raise ValueError(f"expected {self.size} values, got {vec.size}")
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            bs.append(vec[pos:pos + b.size].copy())
            pos += b.size
        return ModelParams(ws, bs)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def same_as(self, other: "ModelParams") -> bool:
        """Bit-level equality of every array."""
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(
            x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in zip(a, b))


def init_std(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)


def init_params(layer_sizes: Sequence[int], seed) -> ModelParams:
    """He-initialised weights, zero biases.

    ``seed`` may be anything ``np.random.default_rng`` accepts, including a
    ``Generator`` (which is then consumed).
    """
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(int(s) != s or s <= 0 for s in sizes):
        raise ValueError(f"layer_sizes must be >= 2 positive integers, got {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, init_std(fan_in), size=(fan_out, fan_in)).astype(DTYPE))
        biases.append(np.zeros(fan_out, dtype=DTYPE))
    return ModelParams(weights, biases)


@dataclass
class ForwardTrace:
    """Cached activations of one forward pass.

    ``inputs[j]`` is what layer ``j`` consumed and ``pre[j]`` the affine output
    of hidden layer ``j`` before ReLU.  Arrays are always 2-D internally;
    ``batched`` remembers whether the caller passed a single vector.
    """

    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    out: np.ndarray
    batched: bool = True

    @property
    def logits(self) -> np.ndarray:
        return self.out if self.batched else self.out[0]

    @property
    def feature(self) -> np.ndarray:
        return self.inputs[-1] if self.batched else self.inputs[-1][0]


def forward(params: ModelParams, x: np.ndarray) -> ForwardTrace:
    x = np.asarray(x, dtype=DTYPE)
    batched = x.ndim == 2
    a = x if batched else x[None, :]
    if a.ndim != 2 or a.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"input shape {x.shape} does not match in-dim {params.layer_sizes[0]}")
    inputs, pre = [], []
    last = params.num_layers - 1
    for j, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w.T + b
        if j == last:
            return ForwardTrace(inputs, pre, z, batched)
        pre.append(z)
        a = np.maximum(z, 0.0)
    raise AssertionError("unreachable")


def backward(params: ModelParams, trace: ForwardTrace, dlogits: np.ndarray,
             dfeature: np.ndarray | None = None) -> ModelParams:
    """Gradient of a scalar loss given its derivatives w.r.t. logits and feature.

    Both upstream arrays are *not* averaged here; whatever reduction the loss
    uses must already be folded into them.
    """
    delta = np.asarray(dlogits, dtype=DTYPE)
    if not trace.batched:
        delta = delta[None, :]
    if delta.shape != trace.out.shape:
        raise ValueError(f"dlogits shape {np.shape(dlogits)} != logits shape {trace.logits.shape}")
    if dfeature is not None:
        dfeature = np.asarray(dfeature, dtype=DTYPE)
        if not trace.batched:
            dfeature = dfeature[None, :]
        if dfeature.shape != trace.inputs[-1].shape:
            raise ValueError(f"dfeature shape {dfeature.shape} != feature shape")

    L = params.num_layers
    dws: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    dws[-1] = delta.T @ trace.inputs[-1]
    dbs[-1] = delta.sum(axis=0)
    if L > 1:
        da = delta @ params.weights[-1]
        if dfeature is not None:
            da = da + dfeature
        for j in range(L - 2, -1, -1):
            dz = da * (trace.pre[j] > 0.0)
            dws[j] = dz.T @ trace.inputs[j]
            dbs[j] = dz.sum(axis=0)
            if j:
                da = dz @ params.weights[j]
    return ModelParams(dws, dbs)


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward(params, x).logits, axis=-1)


def accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(predict(params, x) == np.asarray(y)))


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_ce(logits: np.ndarray, y):
    """Per-sample cross entropy and its gradient w.r.t. logits.

    Accepts a single ``(C,)`` vector with an int label, or ``(n, C)`` with an
    ``(n,)`` label array (returns per-sample losses, not the mean).
    """
    z = np.asarray(logits, dtype=DTYPE)
    C = z.shape[-1]
    labels = np.asarray(y)
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"class index out of range [0, {C})")
    if not np.isfinite(z).all():
        raise ValueError("logits must be finite")
    logp = log_softmax(z)
    if z.ndim == 1:
        grad = np.exp(logp)
        grad[int(labels)] -= 1.0
        return float(-logp[int(labels)]), grad
    rows = np.arange(z.shape[0])
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return -logp[rows, labels], grad


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32
    lr_schedule: str = "cosine-to-zero"

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        # zero epochs is a legal no-op stage
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_schedule not in ("constant", "cosine-to-zero", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.learning_rate
        return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * epoch / self.epochs))


def sgd_step(params: ModelParams, gradient: ModelParams, velocity: ModelParams,
             config: SgdConfig, epoch: int) -> tuple[ModelParams, ModelParams]:
    if not gradient.all_finite():
        raise TrainingDiverged(f"non-finite gradient at epoch {epoch}")
    lr = config.lr_at(epoch)
    mu = config.momentum
    velocity = velocity.combine(gradient, lambda v, g: mu * v + g)
    params = params.combine(velocity, lambda p, v: p - lr * v)
    return params, velocity


LossFn = Callable[[ModelParams, np.ndarray, int], "tuple[float, ModelParams]"]


@dataclass
class FitResult:
    params: ModelParams
    velocity: ModelParams
    final_loss: float
    epoch_losses: list[float] = field(default_factory=list)


def fit(params: ModelParams, n: int, loss_fn: LossFn, config: SgdConfig,
        rng: np.random.Generator, on_epoch_start: Callable[[int], None] | None = None) -> FitResult:
    """Minibatch SGD over ``n`` samples addressed by index.

    ``loss_fn(params, batch_idx, epoch)`` returns the batch-mean loss and its
    gradient.  A fresh velocity is used, i.e. the optimiser state and the lr
    schedule restart on every call.
    """
    velocity = params.zeros_like()
    losses: list[float] = []
    for epoch in range(config.epochs):
        if on_epoch_start is not None:
            on_epoch_start(epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grad = loss_fn(params, idx, epoch)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            params, velocity = sgd_step(params, grad, velocity, config, epoch)
            total += loss * len(idx)
        losses.append(total / n if n else 0.0)
    return FitResult(params, velocity, losses[-1] if losses else float("nan"), losses)
