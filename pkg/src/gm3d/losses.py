"""Training objectives: point-space Chamfer, feature distillation, and the
pairwise difficulty-ranking loss, plus their weighted combination.

The ranking loss treats the detached per-patch reconstruction loss as ground
truth and pushes predicted complexity scores into the same order, pair by
pair. Both reconstruction losses also feed that ground truth: point-space
Chamfer always, the feature term only once the distillation warmup has
passed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Value, cat

__all__ = [
    "LossWeights",
    "PerPatchLoss",
    "chamfer",
    "chamfer_batch",
    "loss_rec_p",
    "loss_rec_f",
    "loss_gc",
    "total_loss",
]


@dataclass(frozen=True)
class LossWeights:
    """Weights of the ranking / point / feature loss terms."""

    alpha: float = 1.0
    beta: float = 1000.0
    gamma: float = 10.0
    warmup_epochs: int = 15  # feature term joins after this many epochs

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0 or self.warmup_epochs < 0:
            raise ValueError("loss weights must be non-negative")

    def gamma_at(self, epoch: int) -> float:
        return self.gamma if epoch >= self.warmup_epochs else 0.0


@dataclass(frozen=True)
class PerPatchLoss:
    """Detached per-masked-patch loss components (ranking ground truth)."""

    chamfer: np.ndarray
    feature_mse: np.ndarray

    def __post_init__(self):
        if self.chamfer.shape != self.feature_mse.shape:
            raise ValueError("component vectors must have equal length")

    @property
    def combined(self) -> np.ndarray:
        return self.chamfer + self.feature_mse


def _as_points(x, name: str) -> Value:
    v = x if isinstance(x, Value) else Value(np.asarray(x))
    if v.data.ndim != 2 or v.data.shape[1] != 3 or v.data.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty (n, 3) point set")
    return v


def chamfer(a, b) -> Value:
    """Two-sided sum of squared nearest-neighbor distances between point sets.

    Differentiable with respect to both sets; the gradient routes through the
    nearest neighbor of each point (lowest index on exact ties).
    """
    va = _as_points(a, "first point set")
    vb = _as_points(b, "second point set")
    na, nb = va.data.shape[0], vb.data.shape[0]
    diff = va.reshape((na, 1, 3)) - vb.reshape((1, nb, 3))
    d2 = (diff * diff).sum(axis=2)
    return d2.min(axis=1).sum() + d2.min(axis=0).sum()


def chamfer_batch(pred: Value, target) -> Value:
    """Per-patch Chamfer over aligned (n, K, 3) stacks -> (n,) vector."""
    tgt = target if isinstance(target, Value) else Value(np.asarray(target))
    if pred.data.shape != tgt.data.shape:
        raise ValueError(
            f"shape mismatch: predictions {pred.data.shape} vs targets {tgt.data.shape}"
        )
    n, k, _ = pred.data.shape
    diff = pred.reshape((n, k, 1, 3)) - tgt.reshape((n, 1, k, 3))
    d2 = (diff * diff).sum(axis=3)  # (n, k, k)
    return d2.min(axis=2).sum(axis=1) + d2.min(axis=1).sum(axis=1)


def loss_rec_p(pred: Value, target) -> tuple[Value, Value]:
    """Mean and per-patch Chamfer between predicted and true masked patches."""
    per_patch = chamfer_batch(pred, target)
    return per_patch.mean(), per_patch


def loss_rec_f(
    teacher_features: np.ndarray,
    student_tokens: Value,
    masked: np.ndarray,
) -> tuple[Value, Value]:
    """Feature-space reconstruction error at masked positions.

    Both feature sets must be length-N in original patch order; the per-patch
    value is the squared difference averaged over the feature dimension.
    """
    masked = np.asarray(masked, dtype=np.int64)
    n = student_tokens.data.shape[0]
    teacher_features = np.asarray(teacher_features)
    if teacher_features.shape != student_tokens.data.shape:
        raise ValueError(
            f"feature shape mismatch: teacher {teacher_features.shape} "
            f"vs student {student_tokens.data.shape}"
        )
    if masked.size == 0:
        zero = Value(np.zeros((), dtype=student_tokens.data.dtype))
        return zero, Value(np.zeros((0,), dtype=student_tokens.data.dtype))
    if masked.min() < 0 or masked.max() >= n:
        raise ValueError("masked indices out of range")
    diff2 = student_tokens.take(masked).sqdiff(teacher_features[masked])
    per_patch = diff2.mean(axis=1)
    return per_patch.mean(), per_patch


def loss_gc(scores: Value, ground_truth: np.ndarray, normalize: bool = True) -> Value:
    """Pairwise logistic ranking loss against a detached difficulty vector.

    For every ordered pair (k, l) with distinct ground-truth values the loss
    adds -log sigmoid(s_k - s_l) when patch k is truly harder and
    -log(1 - sigmoid(s_k - s_l)) when it is truly easier; equal-difficulty
    pairs contribute nothing. With `normalize` the sum is divided by the
    number of contributing pairs so the scale is independent of patch count.
    """
    gt = np.asarray(ground_truth)
    n = scores.data.shape[0]
    if gt.shape != (n,):
        raise ValueError(f"ground truth length {gt.shape} does not match {n} scores")
    dtype = scores.data.dtype
    harder = (gt[:, None] > gt[None, :]).astype(dtype)
    easier = (gt[:, None] < gt[None, :]).astype(dtype)
    n_pairs = float(harder.sum() + easier.sum())
    if n_pairs == 0:
        return Value(np.zeros((), dtype=dtype))
    diffs = scores.reshape((n, 1)) - scores.reshape((1, n))
    # log(1 - sigmoid(x)) == logsigmoid(-x)
    total = -(diffs.logsigmoid() * harder).sum() - ((-diffs).logsigmoid() * easier).sum()
    if normalize:
        total = total * (1.0 / n_pairs)
    return total


def total_loss(
    weights: LossWeights,
    l_gc: Value,
    l_rec_p: Value,
    l_rec_f: Value,
    epoch: int,
) -> Value:
    """alpha * ranking + beta * point + gamma * feature, gamma zero in warmup."""
    return (
        weights.alpha * l_gc
        + weights.beta * l_rec_p
        + weights.gamma_at(epoch) * l_rec_f
    )
