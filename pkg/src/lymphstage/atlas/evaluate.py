"""Evaluate region rules against landmark label maps and build the atlas."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from ..regions import REGION_INDEX, REGIONS, RegionId
from ..volume import Grid3, GridMismatchError, LabelVolume, VoxelSet
from . import dsl

log = logging.getLogger(__name__)

_AXIS = {"left": 0, "right": 0, "posterior": 1, "anterior": 1, "inferior": 2, "superior": 2}
_POSITIVE = {"right", "anterior", "superior"}


class LandmarkSet:
    """Named boolean landmark masks on one grid, drawn from one or more
    label maps (e.g. an organ map and a body-outline map)."""

    def __init__(self, grid: Grid3, masks: Mapping[str, np.ndarray]):
        self.grid = grid
        self._masks: dict[str, np.ndarray] = {}
        for name, m in masks.items():
            m = np.asarray(m, dtype=bool)
            if m.shape != grid.dims:
                raise GridMismatchError(f"landmark {name!r} has shape {m.shape}, grid is {grid.dims}")
            self._masks[name] = m

    @classmethod
    def from_label_maps(cls, maps: LabelVolume | Sequence[LabelVolume]) -> "LandmarkSet":
        if isinstance(maps, LabelVolume):
            maps = [maps]
        maps = list(maps)
        if not maps:
            raise ValueError("at least one landmark label map is required")
        grid = maps[0].grid
        masks: dict[str, np.ndarray] = {}
        for lv in maps:
            if lv.grid != grid:
                raise GridMismatchError("landmark label maps must share one grid; resample them first")
            for label, name in lv.names.items():
                m = lv.labels == label
                masks[name] = masks[name] | m if name in masks else m
        return cls(grid, masks)

    def names(self) -> list[str]:
        return sorted(self._masks)

    def get(self, name: str) -> np.ndarray | None:
        """The landmark mask, or None when absent or empty."""
        m = self._masks.get(name)
        if m is None or not m.any():
            return None
        return m


class _Evaluator:
    def __init__(self, landmarks: LandmarkSet):
        self.lm = landmarks
        self.grid = landmarks.grid
        self.warnings: list[str] = []
        self._coords = [self.grid.world_axis(a) for a in range(3)]
        self._extent_cache: dict[tuple[str, ...], tuple[np.ndarray, np.ndarray, np.ndarray] | None] = {}

    def warn(self, msg: str):
        if msg not in self.warnings:
            self.warnings.append(msg)
            log.warning(msg)

    def empty(self) -> np.ndarray:
        return np.zeros(self.grid.dims, dtype=bool)

    def landmark(self, name: str) -> np.ndarray | None:
        m = self.lm.get(name)
        if m is None:
            self.warn(f"landmark {name!r} is missing or empty")
        return m

    def extent(self, names: tuple[str, ...]):
        """(world min, world max, world centroid) over the union of the named
        landmarks' voxel centers; None if all are missing."""
        if names in self._extent_cache:
            return self._extent_cache[names]
        masks = [m for m in (self.landmark(n) for n in names) if m is not None]
        result = None
        if masks:
            union = masks[0] if len(masks) == 1 else np.logical_or.reduce(masks)
            idx = np.argwhere(union)
            world = self.grid.index_to_world(idx)
            result = (world.min(axis=0), world.max(axis=0), world.mean(axis=0))
        self._extent_cache[names] = result
        return result

    def run(self, node: dsl.Node) -> np.ndarray:
        if isinstance(node, dsl.Landmark):
            m = self.landmark(node.name)
            return self.empty() if m is None else m.copy()
        if isinstance(node, dsl.Union):
            out = self.run(node.items[0])
            for item in node.items[1:]:
                out |= self.run(item)
            return out
        if isinstance(node, dsl.Intersect):
            out = self.run(node.items[0])
            for item in node.items[1:]:
                if not out.any():
                    break
                out &= self.run(item)
            return out
        if isinstance(node, dsl.Subtract):
            out = self.run(node.base)
            for item in node.removed:
                if not out.any():
                    break
                out &= ~self.run(item)
            return out
        if isinstance(node, dsl.Dilate):
            return dilate_mm(self.run(node.operand), self.grid, node.radius_mm)
        if isinstance(node, dsl.Hull):
            ext = self.extent(node.names)
            if ext is None:
                return self.empty()
            lo, hi, _ = ext
            x, y, z = self._coords
            return ((x >= lo[0]) & (x <= hi[0]) & (y >= lo[1]) & (y <= hi[1]) & (z >= lo[2]) & (z <= hi[2]))
        if isinstance(node, dsl.Slab):
            ext = self.extent(node.names)
            if ext is None:
                return self.empty()
            lo, hi, _ = ext
            z = self._coords[2]
            return np.broadcast_to((z >= lo[2]) & (z <= hi[2]), self.grid.dims).copy()
        if isinstance(node, dsl.MidlineSide):
            ext = self.extent((node.name,))
            if ext is None:
                return self.empty()
            cx = ext[2][0]
            x = self._coords[0]
            side = (x < cx) if node.side == "left" else (x >= cx)
            return np.broadcast_to(side, self.grid.dims).copy()
        if isinstance(node, dsl.HalfSpace):
            ext = self.extent(node.names)
            if ext is None:
                return self.empty()
            lo, hi, centroid = ext
            axis = _AXIS[node.direction]
            coord = self._coords[axis]
            if node.direction in _POSITIVE:
                ref = centroid[axis] if node.ref_kind == "centroid" else hi[axis]
                pred = coord > ref + node.offset_mm
            else:
                ref = centroid[axis] if node.ref_kind == "centroid" else lo[axis]
                pred = coord < ref - node.offset_mm
            return np.broadcast_to(pred, self.grid.dims).copy()
        raise TypeError(f"unknown rule node {type(node).__name__}")


def dilate_mm(mask: np.ndarray, grid: Grid3, radius_mm: float) -> np.ndarray:
    """Voxels whose center lies within ``radius_mm`` (Euclidean, world mm) of
    a voxel center of ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if radius_mm <= 0 or not mask.any():
        return mask.copy()
    idx = np.argwhere(mask)
    pad = [int(np.ceil(radius_mm / s)) for s in grid.spacing]
    lo = [max(0, int(idx[:, a].min()) - pad[a]) for a in range(3)]
    hi = [min(grid.dims[a], int(idx[:, a].max()) + pad[a] + 1) for a in range(3)]
    crop = tuple(slice(lo[a], hi[a]) for a in range(3))
    dist = ndimage.distance_transform_edt(~mask[crop], sampling=grid.spacing)
    out = np.zeros_like(mask)
    out[crop] = dist <= radius_mm + 1e-9
    return out


def _as_landmarks(landmarks, grid: Grid3) -> LandmarkSet:
    if not isinstance(landmarks, LandmarkSet):
        landmarks = LandmarkSet.from_label_maps(landmarks)
    if landmarks.grid != grid:
        raise GridMismatchError("landmarks must be resampled to the target grid before evaluation")
    return landmarks


def evaluate_mask(ast: dsl.Node, landmarks, grid: Grid3, warnings: list[str] | None = None) -> np.ndarray:
    ev = _Evaluator(_as_landmarks(landmarks, grid))
    out = ev.run(ast)
    if warnings is not None:
        warnings.extend(ev.warnings)
    return out


def evaluate_rule(ast: dsl.Node, landmarks, grid: Grid3, warnings: list[str] | None = None) -> VoxelSet:
    """Evaluate one rule expression to a voxel set on ``grid``.

    Missing or empty landmarks evaluate to the empty set and add a warning
    instead of failing.
    """
    return VoxelSet.from_mask(grid, evaluate_mask(ast, landmarks, grid, warnings))


@dataclass
class RegionAtlas:
    grid: Grid3
    labels: np.ndarray  # 0 = no region, else RegionId.label
    rule_hash: str = ""
    raw_counts: dict[RegionId, int] = field(default_factory=dict)
    overlap_voxels: int = 0
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int16).reshape(self.grid.dims)
        self.labels.setflags(write=False)

    def region(self, region: RegionId | str) -> VoxelSet:
        return VoxelSet(self.grid, np.flatnonzero(self.labels.ravel() == RegionId(region).label))

    @property
    def regions(self) -> dict[RegionId, VoxelSet]:
        return {r: self.region(r) for r in REGIONS}

    def counts(self) -> dict[RegionId, int]:
        c = np.bincount(self.labels.ravel(), minlength=len(REGIONS) + 1)
        return {r: int(c[r.label]) for r in REGIONS}

    def overlaps(self, voxels: VoxelSet) -> dict[RegionId, int]:
        """Per-region overlap counts of a voxel set with the atlas."""
        if voxels.grid != self.grid:
            raise GridMismatchError("lesion and atlas are on different grids")
        hits = np.bincount(self.labels.ravel()[voxels.indices], minlength=len(REGIONS) + 1)
        return {r: int(hits[r.label]) for r in REGIONS}

    def to_label_volume(self) -> LabelVolume:
        return LabelVolume(self.grid, self.labels.astype(np.int32), {r.label: r.value for r in REGIONS})

    def manifest(self) -> dict:
        counts = self.counts()
        return {
            "rule_hash": self.rule_hash,
            "grid": self.grid.to_dict(),
            "regions": {r.value: {"label": r.label, "voxels": counts[r], "raw_voxels": self.raw_counts.get(r, 0)}
                        for r in REGIONS},
            "overlap_voxels_resolved": self.overlap_voxels,
            "empty_regions": [r.value for r in REGIONS if counts[r] == 0],
            "warnings": list(self.warnings),
        }


def build_atlas(rules: dsl.RuleSet, landmarks, grid: Grid3) -> RegionAtlas:
    """Evaluate all 21 region rules and make them mutually exclusive.

    A voxel claimed by several regions goes to the one with the smallest
    priority number; ties follow region enumeration order.
    """
    lm = _as_landmarks(landmarks, grid)
    ev = _Evaluator(lm)
    raw: dict[RegionId, np.ndarray] = {}
    for region in REGIONS:
        raw[region] = ev.run(rules[region].expr)
    claims = np.zeros(grid.dims, dtype=np.int16)
    for m in raw.values():
        claims += m
    labels = np.zeros(grid.dims, dtype=np.int16)
    order = sorted(REGIONS, key=lambda r: (rules[r].priority, REGION_INDEX[r]))
    for region in order:
        free = raw[region] & (labels == 0)
        labels[free] = region.label
    warnings = list(ev.warnings)
    for region in REGIONS:
        if not (labels == region.label).any():
            msg = f"region {region.value} is empty"
            warnings.append(msg)
            log.warning(msg)
    return RegionAtlas(grid, labels, rules.source_hash, {r: int(m.sum()) for r, m in raw.items()},
                       int((claims > 1).sum()), warnings)


def load_default_rules() -> dsl.RuleSet:
    return dsl.parse_rules(default_rules_text())


def default_rules_text() -> str:
    from importlib import resources
    return resources.files(__package__).joinpath("regions.rules").read_text(encoding="utf-8")


def check_exclusive(sets: Iterable[VoxelSet]) -> int:
    """Number of voxels that appear in more than one set."""
    sets = list(sets)
    if not sets:
        return 0
    all_idx = np.concatenate([s.indices for s in sets])
    _, counts = np.unique(all_idx, return_counts=True)
    return int((counts > 1).sum())
