"""Binary lesion masks: the SUV threshold baseline and external mask import."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import nifti
from .volume import Grid3, LabelVolume, ScalarVolume, label_components, resample, same_grid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegmentationConfig:
    mode: str = "threshold"
    suv_threshold: float = 2.5
    znorm_threshold: float = 2.0
    combine: str = "and"
    min_lesion_voxels: int = 3
    connectivity: int = 26

    def __post_init__(self):
        if self.mode not in ("threshold", "external"):
            raise ValueError(f"segmentation mode must be 'threshold' or 'external', got {self.mode!r}")
        if self.combine not in ("and", "or"):
            raise ValueError(f"combine must be 'and' or 'or', got {self.combine!r}")
        if not (np.isfinite(self.suv_threshold) and np.isfinite(self.znorm_threshold)):
            raise ValueError("thresholds must be finite")
        if int(self.min_lesion_voxels) < 1:
            raise ValueError("min_lesion_voxels must be >= 1")
        if self.connectivity not in (6, 18, 26):
            raise ValueError("connectivity must be 6, 18 or 26")

    def to_dict(self) -> dict:
        return asdict(self)


def remove_small_components(mask: np.ndarray, min_voxels: int, connectivity: int = 26) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if min_voxels <= 1 or not mask.any():
        return mask.copy()
    labeled, n = label_components(mask, connectivity)
    sizes = np.bincount(labeled.ravel(), minlength=n + 1)
    keep = sizes >= min_voxels
    keep[0] = False
    return keep[labeled]


def threshold_segment(pet: ScalarVolume, petnorm: ScalarVolume | None,
                      cfg: SegmentationConfig = SegmentationConfig()) -> LabelVolume:
    """Foreground where SUV > ``suv_threshold`` combined (and/or) with
    SUVnorm > ``znorm_threshold``; components below ``min_lesion_voxels`` are
    dropped. With ``petnorm=None`` only the absolute SUV floor applies."""
    fg = pet.values > cfg.suv_threshold
    if petnorm is not None:
        same_grid(pet.grid, petnorm.grid, what="PET and SUVnorm")
        zfg = petnorm.values > cfg.znorm_threshold
        fg = (fg & zfg) if cfg.combine == "and" else (fg | zfg)
    fg = remove_small_components(fg, cfg.min_lesion_voxels, cfg.connectivity)
    return LabelVolume.binary(pet.grid, fg, "lesion")


def binarize(labels: LabelVolume) -> LabelVolume:
    return LabelVolume.binary(labels.grid, labels.labels > 0, "lesion")


def import_lesion_mask(path, target: Grid3) -> LabelVolume:
    """Read an externally produced lesion mask, binarize any nonzero label,
    and bring it onto ``target`` with nearest-neighbour sampling."""
    raw = nifti.read_labels(path)
    mask = binarize(raw)
    if mask.grid != target:
        mask = resample(mask, target, "nearest")
    count = int(mask.labels.sum())
    if count == 0:
        log.warning("lesion mask %s has no foreground voxels", path)
    else:
        log.info("lesion mask %s: %d foreground voxels", path, count)
    return mask
