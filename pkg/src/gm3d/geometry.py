"""Point-cloud sampling, grouping, and normalization kernels.

Everything here is brute force on purpose: at desk scale (a few thousand
points) pairwise distance matrices beat any acceleration structure. All
distances are squared (ordering is unaffected) and computed in float64 so
tie-breaking is stable regardless of the storage dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PointCloud",
    "PatchSet",
    "fps",
    "knn_group",
    "normalize_patches",
    "unit_sphere_normalize",
    "as_rng",
]


def as_rng(seed) -> np.random.Generator:
    """Accept an int seed, a seed sequence list, or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class PointCloud:
    """Unordered set of 3D points, optionally labeled with a class id."""

    points: np.ndarray  # (N_p, 3) float32
    label: int | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points), dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3); got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class PatchSet:
    """Patchified cloud: N patches of K points each plus their centers.

    `patches` are absolute coordinates until `normalize_patches` is applied,
    after which each patch is expressed relative to its own center (so the
    first row of every patch becomes the zero triple).
    """

    centers: np.ndarray  # (N, 3)
    patches: np.ndarray  # (N, K, 3)
    center_indices: np.ndarray  # (N,) indices into the source cloud

    def __post_init__(self):
        if self.centers.shape[0] != self.patches.shape[0]:
            raise ValueError("centers and patches disagree on patch count")
        if self.center_indices.shape[0] != self.centers.shape[0]:
            raise ValueError("center_indices and centers disagree on patch count")

    @property
    def n_patches(self) -> int:
        return self.centers.shape[0]

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]


def fps(cloud: PointCloud, n_centers: int, seed) -> np.ndarray:
    """Farthest-point sampling of `n_centers` distinct indices.

    The first index is drawn uniformly from the seeded generator; every
    subsequent one maximizes the minimum squared distance to the centers
    chosen so far, ties going to the lowest index.
    """
    n = cloud.n_points
    if not 1 <= n_centers <= n:
        raise ValueError(f"n_centers must be in [1, {n}]; got {n_centers}")
    rng = as_rng(seed)
    pts = cloud.points.astype(np.float64)

    out = np.empty(n_centers, dtype=np.int64)
    out[0] = int(rng.integers(n))
    best_d2 = ((pts - pts[out[0]]) ** 2).sum(axis=1)
    for i in range(1, n_centers):
        nxt = int(np.argmax(best_d2))  # argmax takes the first max on ties
        out[i] = nxt
        d2 = ((pts - pts[nxt]) ** 2).sum(axis=1)
        np.minimum(best_d2, d2, out=best_d2)
    return out


def knn_group(cloud: PointCloud, center_indices, k: int) -> PatchSet:
    """Group the K nearest points around each center (absolute coordinates).

    The center itself is a member of its own patch and is placed first; the
    remaining points follow in (squared distance, index) order. Patches may
    overlap.
    """
    n = cloud.n_points
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]; got {k}")
    centers_idx = np.asarray(center_indices, dtype=np.int64)
    pts = cloud.points.astype(np.float64)

    d2 = ((pts[centers_idx][:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    neighbor_idx = np.empty((len(centers_idx), k), dtype=np.int64)
    for i, ci in enumerate(centers_idx):
        order = np.argsort(d2[i], kind="stable")
        sel = order[:k]
        if ci not in sel:
            # only possible when >= k coincident lower-index points exist
            sel = np.concatenate(([ci], sel[: k - 1]))
        rest = sel[sel != ci]
        neighbor_idx[i, 0] = ci
        neighbor_idx[i, 1:] = rest
    return PatchSet(
        centers=cloud.points[centers_idx].copy(),
        patches=cloud.points[neighbor_idx],
        center_indices=centers_idx,
    )


def normalize_patches(ps: PatchSet) -> PatchSet:
    """Subtract each patch's center from its coordinates.

    Not idempotent on the patches field: apply exactly once, right after
    grouping.
    """
    return PatchSet(
        centers=ps.centers,
        patches=ps.patches - ps.centers[:, None, :],
        center_indices=ps.center_indices,
    )


def unit_sphere_normalize(cloud: PointCloud) -> PointCloud:
    """Center the cloud at the origin and scale the farthest point to norm 1."""
    pts = cloud.points.astype(np.float64)
    pts = pts - pts.mean(axis=0)
    scale = max(float(np.linalg.norm(pts, axis=1).max()), 1e-12)
    return PointCloud(points=(pts / scale).astype(np.float32), label=cloud.label)
