"""Compact descriptor model, softmax-triplet loss and 1cycle SGD trainer."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .samplers import IndexTriplet, Triplet

logger = logging.getLogger(__name__)

DESCRIPTOR_DIM = 30
HIDDEN = (64, 48)
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")
MODEL_FORMAT_VERSION = 1


@dataclass(eq=False)
class EmbeddingModel:
    """``d_raw -> 64 -> 48 -> 30`` leaky-ReLU MLP with an L2-normalised output."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    @classmethod
    def init(cls, d_raw: int = 128, seed: int = 0, hidden=HIDDEN, dim: int = DESCRIPTOR_DIM) -> "EmbeddingModel":
        rng = np.random.default_rng([int(seed), 11])
        sizes = (d_raw, *hidden, dim)
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            params.append(rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in))
            params.append(np.zeros(fan_out))
        return cls(*params)

    @property
    def params(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, k) for k in PARAM_NAMES)

    @property
    def d_raw(self) -> int:
        return self.W1.shape[0]

    @property
    def dim(self) -> int:
        return self.W3.shape[1]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(*(p.copy() for p in self.params))

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def save(self, path) -> None:
        np.savez(
            path,
            format_version=np.int64(MODEL_FORMAT_VERSION),
            **{k: v for k, v in zip(PARAM_NAMES, self.params)},
        )

    @classmethod
    def load(cls, path) -> "EmbeddingModel":
        with np.load(path) as z:
            version = int(z["format_version"])
            if version != MODEL_FORMAT_VERSION:
                raise ValueError(f"unsupported model format version {version}")
            return cls(*(np.array(z[k], dtype=np.float64) for k in PARAM_NAMES))


def _check_raw(model: EmbeddingModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.d_raw:
        raise ValueError(f"expected features of dim {model.d_raw}, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature values")
    return np.ascontiguousarray(X)


def embed(model: EmbeddingModel, raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1:
        raise ValueError("embed takes a single feature vector; use embed_batch for matrices")
    return embed_batch(model, raw[None, :])[0]


def embed_batch(model: EmbeddingModel, X, chunk: int = 8192) -> np.ndarray:
    X = _check_raw(model, X)
    fn = kernels.get("embed_batch")
    out = np.empty((X.shape[0], model.dim))
    for lo in range(0, X.shape[0], chunk):
        out[lo : lo + chunk] = fn(*model.params, X[lo : lo + chunk])
    return out


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softmax_cross_entropy(dp, dn):
    """Two-class cross entropy of ``softmax((dp, dn))`` against the ``dn`` slot."""
    dp = np.asarray(dp, dtype=float)
    dn = np.asarray(dn, dtype=float)
    m = np.maximum(dp, dn)
    return -(dn - m - np.log(np.exp(dp - m) + np.exp(dn - m)))


def _triplet_arrays(triplets):
    if isinstance(triplets, Triplet):
        triplets = [triplets]
    xa = np.stack([t.anchor.raw_feature for t in triplets])
    xp = np.stack([t.positive.raw_feature for t in triplets])
    xn = np.stack([t.negative.raw_feature for t in triplets])
    return xa, xp, xn


def triplet_loss(model: EmbeddingModel, triplet: Triplet) -> float:
    xa, xp, xn = _triplet_arrays(triplet)
    za, zp, zn = (embed_batch(model, x) for x in (xa, xp, xn))
    dp = np.linalg.norm(za - zp, axis=1)
    dn = np.linalg.norm(za - zn, axis=1)
    return float(softplus(dp - dn)[0])


def batch_loss_and_grad(model: EmbeddingModel, xa, xp, xn, backend: str | None = None):
    """Mean triplet loss over a batch, per-triplet losses and parameter gradients."""
    xa, xp, xn = (_check_raw(model, x) for x in (xa, xp, xn))
    fn = kernels.get("triplet_step", backend)
    loss, dp, dn, *grads = fn(*model.params, xa, xp, xn)
    return float(loss.mean()), loss, dict(zip(PARAM_NAMES, grads))


def loss_gradient(model: EmbeddingModel, triplet: Triplet) -> dict[str, np.ndarray]:
    _, _, grads = batch_loss_and_grad(model, *_triplet_arrays(triplet))
    return grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSchedule:
    steps: int = 30000
    max_lr: float = 0.003
    min_momentum: float = 0.85
    max_momentum: float = 0.95
    weight_decay: float = 1e-6
    seed: int = 0
    batch_size: int = 16

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")
        if not 0.0 <= self.min_momentum <= self.max_momentum < 1.0:
            raise ValueError("need 0 <= min_momentum <= max_momentum < 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_momentum(self, step: int) -> tuple[float, float]:
        """Symmetric linear 1cycle: lr 0 -> max -> 0, momentum max -> min -> max."""
        phase = (step + 1) / (self.steps + 1)
        ramp = 1.0 - abs(2.0 * phase - 1.0)
        lr = self.max_lr * ramp
        mom = self.max_momentum - (self.max_momentum - self.min_momentum) * ramp
        return lr, mom


@dataclass
class TrainHistory:
    step: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    momentum: list = field(default_factory=list)
    loss: list = field(default_factory=list)

    def smoothed(self, window: int = 100) -> np.ndarray:
        x = np.asarray(self.loss, dtype=float)
        if x.size < window:
            return x.copy()
        c = np.cumsum(np.concatenate(([0.0], x)))
        return (c[window:] - c[:-window]) / window

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "momentum", "loss"])
            for row in zip(self.step, self.lr, self.momentum, self.loss):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


class NonFiniteLoss(FloatingPointError):
    pass


def train(model: EmbeddingModel, sampler_mix, schedule: TrainSchedule, log_every: int = 0):
    """SGD with momentum under a 1cycle schedule; returns ``(model, history)``.

    ``sampler_mix`` must expose ``db.frames.raw`` and ``sample_indices(rng)``.
    The input model is not modified.
    """
    model = model.copy()
    history = TrainHistory()
    if schedule.steps == 0:
        return model, history
    raw = np.ascontiguousarray(sampler_mix.db.frames.raw, dtype=np.float64)
    rng = np.random.default_rng([int(schedule.seed), 23])
    params = list(model.params)
    velocity = [np.zeros_like(p) for p in params]
    step_fn = kernels.get("triplet_step")
    B = schedule.batch_size
    ia = np.empty(B, dtype=np.int64)
    ip = np.empty(B, dtype=np.int64)
    inn = np.empty(B, dtype=np.int64)
    for step in range(schedule.steps):
        for b in range(B):
            t = sampler_mix.sample_indices(rng)
            if t is None:
                raise RuntimeError("triplet sampler exhausted: no generator can produce a triplet")
            ia[b], ip[b], inn[b] = t.anchor, t.positive, t.negative
        loss, _, _, *grads = step_fn(*params, raw[ia], raw[ip], raw[inn])
        mean_loss = float(loss.mean())
        if not math.isfinite(mean_loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise NonFiniteLoss(f"non-finite loss {mean_loss} at step {step} (lr={schedule.lr_momentum(step)[0]:.3g})")
        lr, mom = schedule.lr_momentum(step)
        for p, v, g in zip(params, velocity, grads):
            v *= mom
            v += g + schedule.weight_decay * p
            p -= lr * v
        history.step.append(step)
        history.lr.append(lr)
        history.momentum.append(mom)
        history.loss.append(mean_loss)
        if log_every and step % log_every == 0:
            logger.info("step %d lr %.5f mom %.3f loss %.4f", step, lr, mom, mean_loss)
    return EmbeddingModel(*params), history


def evaluate_loss(model: EmbeddingModel, raw: np.ndarray, triplets) -> np.ndarray:
    """Per-triplet loss for index triplets against a feature matrix."""
    ia = np.array([t.anchor for t in triplets])
    ip = np.array([t.positive for t in triplets])
    inn = np.array([t.negative for t in triplets])
    za, zp, zn = (embed_batch(model, raw[i]) for i in (ia, ip, inn))
    return softplus(np.linalg.norm(za - zp, axis=1) - np.linalg.norm(za - zn, axis=1))


__all__ = [
    "EmbeddingModel",
    "IndexTriplet",
    "TrainSchedule",
    "TrainHistory",
    "batch_loss_and_grad",
    "embed",
    "embed_batch",
    "evaluate_loss",
    "loss_gradient",
    "softmax_cross_entropy",
    "softplus",
    "train",
    "triplet_loss",
]
