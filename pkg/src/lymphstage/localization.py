"""Lesion-to-region assignment, extranodal detection and the per-patient
involvement profile."""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .atlas import RegionAtlas
from .regions import REGION_INDEX, REGIONS, RegionId
from .staging import InvolvementProfile
from .volume import GridMismatchError, LabelVolume, VoxelSet

SECONDARY_FRACTION = 0.25

DEFAULT_EXTRANODAL_ORGANS = (
    "liver", "lung*", "skeleton", "spine", "vertebra*", "sacrum", "skull", "sternum", "rib_*",
    "clavicle*", "scapula*", "humerus*", "radius*", "ulna*", "hip*", "femur*", "tibia*", "fibula*",
)


@dataclass(frozen=True)
class ExtranodalConfig:
    organs: tuple[str, ...] = DEFAULT_EXTRANODAL_ORGANS
    min_voxels: int = 3
    min_fraction: float = 0.5
    body_labels: tuple[str, ...] = ("body", "body_trunc", "body_extremities")

    def matches(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, pat) for pat in self.organs)

    def to_dict(self) -> dict:
        return {"organs": list(self.organs), "min_voxels": self.min_voxels,
                "min_fraction": self.min_fraction, "body_labels": list(self.body_labels)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExtranodalConfig":
        base = cls()
        return cls(tuple(d.get("organs", base.organs)), int(d.get("min_voxels", base.min_voxels)),
                   float(d.get("min_fraction", base.min_fraction)),
                   tuple(d.get("body_labels", base.body_labels)))


@dataclass
class Lesion:
    id: int
    voxels: VoxelSet
    volume_ml: float
    primary_region: RegionId | None = None
    secondary_regions: list[RegionId] = field(default_factory=list)
    extranodal_organs: list[str] = field(default_factory=list)
    region_overlap: dict[RegionId, int] = field(default_factory=dict)
    organ_overlap: dict[str, int] = field(default_factory=dict)
    status: str = "nodal"  # nodal | extranodal | nodal+extranodal | unlocalized
    extracorporeal: bool = False
    suv_max: float | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "voxel_count": len(self.voxels),
            "volume_ml": self.volume_ml,
            "suv_max": self.suv_max,
            "status": self.status,
            "extracorporeal": self.extracorporeal,
            "primary_region": self.primary_region.value if self.primary_region else None,
            "secondary_regions": [r.value for r in self.secondary_regions],
            "extranodal_organs": list(self.extranodal_organs),
            "region_overlap": {r.value: n for r, n in self.region_overlap.items() if n},
            "organ_overlap": {k: v for k, v in sorted(self.organ_overlap.items()) if v},
        }


def assign_from_overlaps(overlaps: Mapping[RegionId, int]):
    """Primary region = largest overlap (ties by enumeration order); every
    other region whose overlap is strictly more than 25% of the primary's is
    secondary. No overlap at all gives no primary."""
    best, best_n = None, 0
    for r in REGIONS:
        n = int(overlaps.get(r, 0))
        if n > best_n:
            best, best_n = r, n
    if best is None:
        return None, []
    # Integer form of n > 0.25 * best_n, exact for any counts.
    secondaries = [r for r in REGIONS
                   if r is not best and overlaps.get(r, 0) > 0 and 4 * int(overlaps.get(r, 0)) > best_n]
    secondaries.sort(key=lambda r: (-int(overlaps[r]), REGION_INDEX[r]))
    return best, secondaries


def assign_regions(lesion_voxels: VoxelSet, atlas: RegionAtlas):
    """Returns ``(primary, secondaries, overlap_table)`` for one lesion."""
    if lesion_voxels.grid != atlas.grid:
        raise GridMismatchError("lesion and atlas are on different grids")
    table = atlas.overlaps(lesion_voxels)
    primary, secondaries = assign_from_overlaps(table)
    return primary, secondaries, table


def organ_overlaps(lesion_voxels: VoxelSet, organs: LabelVolume) -> dict[str, int]:
    if lesion_voxels.grid != organs.grid:
        raise GridMismatchError("lesion and organ map are on different grids")
    labels = organs.labels.ravel()[lesion_voxels.indices]
    counts = np.bincount(labels) if labels.size else np.zeros(1, dtype=int)
    out: dict[str, int] = {}
    for label, name in organs.names.items():
        if label < counts.size and counts[label]:
            out[name] = out.get(name, 0) + int(counts[label])
    return out


def detect_extranodal(lesion_voxels: VoxelSet, organs: LabelVolume | Sequence[LabelVolume],
                      nodal_overlap_total: int, cfg: ExtranodalConfig = ExtranodalConfig()) -> list[str]:
    """Organs in which the lesion predominantly lies.

    An organ counts when its overlap exceeds both
    ``max(min_voxels, min_fraction * |lesion|)`` and the lesion's total overlap
    with nodal regions.
    """
    maps = [organs] if isinstance(organs, LabelVolume) else list(organs)
    overlap: dict[str, int] = {}
    for lv in maps:
        for name, n in organ_overlaps(lesion_voxels, lv).items():
            overlap[name] = overlap.get(name, 0) + n
    floor = max(cfg.min_voxels, cfg.min_fraction * len(lesion_voxels))
    hits = [name for name, n in overlap.items() if cfg.matches(name) and n > floor and n > nodal_overlap_total]
    return sorted(hits)


def localize_lesion(lesion_id: int, voxels: VoxelSet, atlas: RegionAtlas,
                    organ_maps: Sequence[LabelVolume], cfg: ExtranodalConfig = ExtranodalConfig(),
                    suv=None) -> Lesion:
    primary, secondaries, table = assign_regions(voxels, atlas)
    nodal_total = sum(table.values())
    organs = detect_extranodal(voxels, organ_maps, nodal_total, cfg)
    organ_table: dict[str, int] = {}
    for lv in organ_maps:
        for name, n in organ_overlaps(voxels, lv).items():
            organ_table[name] = organ_table.get(name, 0) + n
    body_names = [n for n in cfg.body_labels if any(lv.label_of(n) is not None for lv in organ_maps)]
    extracorporeal = bool(body_names) and sum(organ_table.get(n, 0) for n in body_names) == 0
    if primary is None and not organs:
        status = "unlocalized"
    elif primary is None:
        status = "extranodal"
    elif organs:
        status = "nodal+extranodal"
    else:
        status = "nodal"
    suv_max = None
    if suv is not None and len(voxels):
        suv_max = float(np.asarray(suv).ravel()[voxels.indices].max())
    return Lesion(lesion_id, voxels, voxels.grid.voxel_volume_ml * len(voxels), primary, secondaries,
                  organs, table, organ_table, status, extracorporeal, suv_max)


def build_involvement(lesions: Sequence[Lesion]) -> InvolvementProfile:
    """Union of primary and secondary regions over all lesions; extranodal if
    any lesion has an extranodal organ."""
    supporting: dict[RegionId, list[int]] = {}
    extranodal = False
    for lesion in lesions:
        regions = ([lesion.primary_region] if lesion.primary_region else []) + list(lesion.secondary_regions)
        for r in regions:
            supporting.setdefault(r, []).append(lesion.id)
        extranodal = extranodal or bool(lesion.extranodal_organs)
    ordered = {r: tuple(sorted(supporting[r])) for r in REGIONS if r in supporting}
    return InvolvementProfile(frozenset(ordered), extranodal, ordered)
