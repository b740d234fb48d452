"""Mask-partition construction: pure random and complexity-guided curriculum.

The curriculum grows the number of hardest patches (by teacher complexity
score) selected for masking from zero at the first epoch to
floor(max_hard_ratio * n_masked) at the final epoch; the remainder of the
mask is always drawn uniformly from the not-yet-selected patches.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

__all__ = [
    "MaskPartition",
    "CurriculumSchedule",
    "mask_count",
    "random_mask",
    "n_sel",
    "gc_guided_mask",
]


@dataclass(frozen=True)
class MaskPartition:
    """Disjoint visible/masked split of patch indices 0..n_patches-1."""

    visible: np.ndarray  # sorted
    masked: np.ndarray  # sorted
    n_patches: int

    def __post_init__(self):
        vis = np.asarray(self.visible, dtype=np.int64)
        mas = np.asarray(self.masked, dtype=np.int64)
        object.__setattr__(self, "visible", vis)
        object.__setattr__(self, "masked", mas)
        union = np.concatenate([vis, mas])
        if len(np.unique(union)) != self.n_patches or len(union) != self.n_patches:
            raise ValueError("visible and masked must partition 0..n_patches-1")
        if union.size and (union.min() < 0 or union.max() >= self.n_patches):
            raise ValueError("partition contains out-of-range indices")

    @property
    def n_masked(self) -> int:
        return len(self.masked)

    @property
    def n_visible(self) -> int:
        return len(self.visible)


@dataclass(frozen=True)
class CurriculumSchedule:
    """Easy-to-hard masking schedule parameters."""

    e_max: int
    max_hard_ratio: float = 0.5  # fraction of the mask budget eventually taken by hardest patches

    def __post_init__(self):
        if self.e_max < 1:
            raise ValueError("e_max must be >= 1")
        if not 0.0 <= self.max_hard_ratio <= 1.0:
            raise ValueError("max_hard_ratio must lie in [0, 1]")


def mask_count(n_patches: int, mask_ratio: float) -> int:
    """Number of masked patches: round(mask_ratio * n_patches), half away from zero."""
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie strictly between 0 and 1")
    return int(np.floor(mask_ratio * n_patches + 0.5))


def _draw(candidates: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(candidates, size=k, replace=False))


def random_mask(n_patches: int, mask_ratio: float, rng: np.random.Generator) -> MaskPartition:
    """Uniform mask without replacement at the given ratio."""
    n_masked = mask_count(n_patches, mask_ratio)
    masked = _draw(np.arange(n_patches), n_masked, rng)
    visible = np.setdiff1d(np.arange(n_patches), masked)
    return MaskPartition(visible=visible, masked=masked, n_patches=n_patches)


def n_sel(epoch: int, schedule: CurriculumSchedule, n_masked: int) -> int:
    """floor(epoch / e_max * max_hard_ratio * n_masked), clamped to [0, n_masked].

    Evaluated with exact rational arithmetic (the ratio is interpreted as the
    decimal it was written as), so the floor never suffers float roundoff.
    """
    if not 0 <= epoch <= schedule.e_max:
        raise ValueError(f"epoch must lie in [0, {schedule.e_max}]")
    exact = Fraction(epoch, schedule.e_max) * Fraction(str(schedule.max_hard_ratio)) * n_masked
    value = exact.numerator // exact.denominator
    return int(min(max(value, 0), n_masked))


def gc_guided_mask(
    scores: np.ndarray,
    n_masked: int,
    n_selected: int,
    rng: np.random.Generator,
) -> MaskPartition:
    """Mask the `n_selected` highest-scoring patches plus a uniform remainder.

    Score ties resolve to the lowest index. The random remainder is drawn
    from every patch not already selected, including low-scoring ones.
    """
    scores = np.asarray(scores)
    n_patches = len(scores)
    if not 0 <= n_selected <= n_masked <= n_patches:
        raise ValueError(
            f"need 0 <= n_selected ({n_selected}) <= n_masked ({n_masked}) <= n ({n_patches})"
        )
    order = np.argsort(-scores, kind="stable")  # stable: lowest index wins ties
    top = order[:n_selected]
    remaining = np.setdiff1d(np.arange(n_patches), top)
    extra = _draw(remaining, n_masked - n_selected, rng)
    masked = np.sort(np.concatenate([top, extra]))
    visible = np.setdiff1d(np.arange(n_patches), masked)
    return MaskPartition(visible=visible, masked=masked, n_patches=n_patches)
