"""Frozen-encoder linear evaluation.

Features are max-pool plus mean-pool over the encoder tokens of the full
(unmasked) patchified cloud. The classifier is a deterministic multinomial
logistic regression trained by full-batch gradient descent: same inputs,
same weights, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, fps, knn_group, normalize_patches
from .model import ModelConfig, ParamTree, embed_patches, encode, inference_view

__all__ = [
    "ProbeWeights",
    "extract_feature",
    "extract_features",
    "standardize",
    "fit_linear_probe",
    "eval_probe",
    "linear_probe_accuracy",
]

# every cloud is patchified with the same fixed seed, so features are
# invariant to sample order
_PROBE_FPS_SEED = 0x9E0


@dataclass(frozen=True)
class ProbeWeights:
    w: np.ndarray  # (n_features, n_classes)
    b: np.ndarray  # (n_classes,)
    mean: np.ndarray
    std: np.ndarray


def extract_feature(
    params: ParamTree, cloud: PointCloud, cfg: ModelConfig, seed: int = _PROBE_FPS_SEED
) -> np.ndarray:
    """Encoder pooled over all patches: concat(max, mean) -> (2 * embed_dim,)."""
    centers = fps(cloud, cfg.n_patches, seed=seed)
    ps = normalize_patches(knn_group(cloud, centers, cfg.patch_size))
    view = inference_view(params)
    tokens = embed_patches(ps.patches, view)
    z = encode(tokens, ps.centers, view, cfg).data
    return np.concatenate([z.max(axis=0), z.mean(axis=0)])


def extract_features(params: ParamTree, clouds, cfg: ModelConfig) -> np.ndarray:
    return np.stack([extract_feature(params, c, cfg) for c in clouds])


def standardize(
    features: np.ndarray, mean: np.ndarray | None = None, std: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-dimension zero-mean unit-variance transform (stats from train split)."""
    if mean is None:
        mean = features.mean(axis=0)
        std = np.maximum(features.std(axis=0), 1e-8)
    return (features - mean) / std, mean, std


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def fit_linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int = 300,
    lr: float = 0.5,
    mean: np.ndarray | None = None,
    std: np.ndarray | None = None,
) -> ProbeWeights:
    """Multinomial logistic regression, full-batch GD, zero init.

    `features` are standardized internally unless mean/std are supplied.
    Raises on single-class input.
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("probe needs at least two classes")
    n_classes = int(labels.max()) + 1
    x, mean, std = standardize(np.asarray(features, dtype=np.float64), mean, std)
    m, f = x.shape

    onehot = np.zeros((m, n_classes))
    onehot[np.arange(m), labels] = 1.0
    w = np.zeros((f, n_classes))
    b = np.zeros(n_classes)
    for _ in range(epochs):
        g = (_softmax_rows(x @ w + b) - onehot) / m
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    return ProbeWeights(w=w, b=b, mean=mean, std=std)


def eval_probe(probe: ProbeWeights, features: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(features) == 0:
        raise ValueError("evaluation set is empty")
    x = (features - probe.mean) / probe.std
    preds = np.argmax(x @ probe.w + probe.b, axis=1)
    return float(np.mean(preds == labels))


def linear_probe_accuracy(
    train_features, train_labels, test_features, test_labels,
    epochs: int = 300, lr: float = 0.5,
) -> float:
    probe = fit_linear_probe(train_features, train_labels, epochs=epochs, lr=lr)
    return eval_probe(probe, test_features, test_labels)
