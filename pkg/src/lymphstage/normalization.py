"""Liver-referenced SUV normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import LabelVolume, ScalarVolume, VolumeKind, same_grid

MIN_LIVER_VOXELS = 100
STD_EPSILON = 1e-6


class LiverStatsError(ValueError):
    """The liver mask is missing, too small, or degenerate."""


@dataclass(frozen=True)
class LiverStats:
    mean_suv: float
    std_suv: float
    voxel_count: int

    def to_dict(self) -> dict:
        return {"mean_suv": self.mean_suv, "std_suv": self.std_suv, "voxel_count": self.voxel_count}


def compute_liver_stats(pet: ScalarVolume, liver_mask: LabelVolume | np.ndarray,
                        min_voxels: int = MIN_LIVER_VOXELS) -> LiverStats:
    """Mean and population standard deviation of SUV inside the liver mask."""
    if isinstance(liver_mask, LabelVolume):
        same_grid(pet.grid, liver_mask.grid, what="PET and liver mask")
        mask = liver_mask.labels > 0
    else:
        mask = np.asarray(liver_mask, dtype=bool)
        if mask.shape != pet.values.shape:
            raise LiverStatsError("liver mask shape differs from PET")
    values = pet.values[mask]
    if values.size == 0:
        raise LiverStatsError("liver mask is empty")
    if values.size < min_voxels:
        raise LiverStatsError(f"liver mask has {values.size} voxels, fewer than the minimum {min_voxels}")
    mean = float(values.mean())
    std = float(values.std(ddof=0))
    if not (np.isfinite(mean) and np.isfinite(std)):
        raise LiverStatsError("liver statistics are not finite")
    return LiverStats(mean, std, int(values.size))


def liver_normalize(pet: ScalarVolume, stats: LiverStats, mode: str = "zscore",
                    eps: float = STD_EPSILON) -> ScalarVolume:
    """Map every voxel to liver-referenced units.

    ``zscore``: (v - mean) / std.  ``ratio``: v / mean.
    """
    if mode == "zscore":
        if stats.std_suv <= eps:
            raise LiverStatsError(f"liver SUV std {stats.std_suv} is degenerate (<= {eps})")
        out = (pet.values - stats.mean_suv) / stats.std_suv
    elif mode == "ratio":
        if stats.mean_suv <= eps:
            raise LiverStatsError(f"liver SUV mean {stats.mean_suv} is degenerate (<= {eps})")
        out = pet.values / stats.mean_suv
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    return ScalarVolume(pet.grid, out, VolumeKind.SUVNORM)


def denormalize(norm: ScalarVolume, stats: LiverStats, mode: str = "zscore") -> ScalarVolume:
    if mode == "zscore":
        out = norm.values * stats.std_suv + stats.mean_suv
    elif mode == "ratio":
        out = norm.values * stats.mean_suv
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    return ScalarVolume(norm.grid, np.maximum(out, 0.0), VolumeKind.SUV)
