"""
3D image grids, dense volumes and sparse voxel sets.

World coordinates follow the RAS+ convention: +x points to the subject's
right, +y anterior, +z superior. A grid maps voxel index ``(i, j, k)`` to the
world position of the voxel *center*::

    world = origin + direction @ (index * spacing)

where ``direction`` is the signed permutation matrix given by the axis
orientation codes (e.g. ``("R", "A", "S")`` is the identity and
``("L", "P", "S")`` flips the first two axes).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

_AXIS_OF_CODE = {"R": (0, 1.0), "L": (0, -1.0), "A": (1, 1.0), "P": (1, -1.0), "S": (2, 1.0), "I": (2, -1.0)}


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Grid3:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: tuple[str, str, str] = ("R", "A", "S")

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        orientation = tuple(str(c).upper() for c in self.orientation)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3 or len(orientation) != 3:
            raise ValueError("dims, spacing, origin and orientation must all have 3 entries")
        if any(d < 1 for d in dims):
            raise ValueError(f"dims must be >= 1, got {dims}")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        if not all(np.isfinite(o) for o in origin):
            raise ValueError(f"origin must be finite, got {origin}")
        if any(c not in _AXIS_OF_CODE for c in orientation):
            raise ValueError(f"unknown orientation code in {orientation}")
        if sorted(_AXIS_OF_CODE[c][0] for c in orientation) != [0, 1, 2]:
            raise ValueError(f"orientation codes {orientation} do not span three distinct axes")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "orientation", orientation)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def voxel_volume_ml(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2] / 1000.0

    @property
    def direction(self) -> np.ndarray:
        d = np.zeros((3, 3))
        for voxel_axis, code in enumerate(self.orientation):
            world_axis, sign = _AXIS_OF_CODE[code]
            d[world_axis, voxel_axis] = sign
        return d

    @property
    def affine(self) -> np.ndarray:
        a = np.eye(4)
        a[:3, :3] = self.direction * np.asarray(self.spacing)
        a[:3, 3] = self.origin
        return a

    def world_axis(self, world: int) -> np.ndarray:
        """World coordinate along world axis ``world`` (0=x, 1=y, 2=z), shaped
        to broadcast against an array of shape ``dims``."""
        for voxel_axis, code in enumerate(self.orientation):
            axis, sign = _AXIS_OF_CODE[code]
            if axis == world:
                coords = self.origin[world] + sign * self.spacing[voxel_axis] * np.arange(self.dims[voxel_axis])
                shape = [1, 1, 1]
                shape[voxel_axis] = self.dims[voxel_axis]
                return coords.reshape(shape)
        raise AssertionError("unreachable")

    def index_to_world(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=float)
        return np.asarray(self.origin) + (index * np.asarray(self.spacing)) @ self.direction.T

    def world_to_index(self, world) -> np.ndarray:
        """Continuous (fractional) voxel index of world points."""
        world = np.asarray(world, dtype=float)
        return ((world - np.asarray(self.origin)) @ self.direction) / np.asarray(self.spacing)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "origin": list(self.origin),
            "orientation": "".join(self.orientation),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Grid3":
        return cls(tuple(d["dims"]), tuple(d["spacing"]), tuple(d.get("origin", (0, 0, 0))),
                   tuple(d.get("orientation", "RAS")))


class VolumeKind(str, Enum):
    SUV = "SUV"
    HU = "HU"
    SUVNORM = "SUVnorm"


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _check_shape(grid: Grid3, arr: np.ndarray) -> np.ndarray:
    if arr.size != grid.size:
        raise ValueError(f"array has {arr.size} values but grid {grid.dims} needs {grid.size}")
    return arr.reshape(grid.dims)


@dataclass(frozen=True)
class ScalarVolume:
    grid: Grid3
    values: np.ndarray
    kind: VolumeKind = VolumeKind.SUV

    def __post_init__(self):
        kind = VolumeKind(self.kind)
        values = _check_shape(self.grid, np.asarray(self.values, dtype=np.float64))
        if kind is VolumeKind.SUV:
            finite = values[np.isfinite(values)]
            if finite.size and finite.min() < 0:
                raise ValueError("SUV volume contains negative values")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "values", _frozen(values))


@dataclass(frozen=True)
class LabelVolume:
    grid: Grid3
    labels: np.ndarray
    names: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.size and not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.equal(np.mod(arr, 1), 0)):
                raise ValueError("label volume must contain integers")
        arr = _check_shape(self.grid, arr.astype(np.int32))
        if arr.size and arr.min() < 0:
            raise ValueError("labels must be non-negative")
        names = {int(k): str(v) for k, v in dict(self.names).items()}
        missing = [int(v) for v in np.unique(arr) if v != 0 and int(v) not in names]
        if missing:
            raise ValueError(f"labels {missing} present in the volume but not in the label dictionary")
        object.__setattr__(self, "labels", _frozen(arr))
        object.__setattr__(self, "names", names)

    @classmethod
    def binary(cls, grid: Grid3, mask: np.ndarray, name: str = "foreground") -> "LabelVolume":
        return cls(grid, np.asarray(mask).astype(bool).astype(np.int32), {1: name})

    def label_of(self, name: str) -> int | None:
        for k, v in self.names.items():
            if v == name:
                return k
        return None

    def mask(self, name: str) -> np.ndarray:
        label = self.label_of(name)
        if label is None:
            return np.zeros(self.grid.dims, dtype=bool)
        return self.labels == label

    def is_binary(self) -> bool:
        return bool(np.isin(self.labels, (0, 1)).all())


class VoxelSet:
    """Sorted, duplicate-free linear (C-order) voxel indices on one grid."""

    __slots__ = ("grid", "indices")

    def __init__(self, grid: Grid3, indices=()):
        idx = np.unique(np.asarray(indices, dtype=np.int64).ravel())
        if idx.size and (idx[0] < 0 or idx[-1] >= grid.size):
            raise IndexError(f"voxel indices out of bounds for grid {grid.dims}")
        idx.setflags(write=False)
        self.grid = grid
        self.indices = idx

    @classmethod
    def from_mask(cls, grid: Grid3, mask: np.ndarray) -> "VoxelSet":
        mask = np.asarray(mask, dtype=bool)
        if mask.size != grid.size:
            raise GridMismatchError("mask size does not match grid")
        return cls(grid, np.flatnonzero(mask))

    def to_mask(self) -> np.ndarray:
        m = np.zeros(self.grid.size, dtype=bool)
        m[self.indices] = True
        return m.reshape(self.grid.dims)

    def __len__(self) -> int:
        return int(self.indices.size)

    def __eq__(self, other) -> bool:
        return (isinstance(other, VoxelSet) and self.grid == other.grid
                and np.array_equal(self.indices, other.indices))

    def __hash__(self):
        return hash((self.grid, self.indices.tobytes()))

    def __repr__(self) -> str:
        return f"VoxelSet({len(self)} voxels on {self.grid.dims})"


def resample(src: ScalarVolume | LabelVolume, target: Grid3, mode: str = "nearest"):
    """Sample ``src`` at the world positions of ``target``'s voxel centers.

    Samples falling outside the source field of view are 0. Trilinear
    interpolation is only defined for scalar volumes.
    """
    if mode not in ("nearest", "trilinear"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    if isinstance(src, LabelVolume) and mode == "trilinear":
        raise ValueError("trilinear resampling is not allowed for label volumes")
    if src.grid.orientation != target.orientation:
        raise GridMismatchError(
            f"orientation mismatch: source {''.join(src.grid.orientation)} vs target {''.join(target.orientation)}")
    data = src.values if isinstance(src, ScalarVolume) else src.labels
    if src.grid == target:
        out = data.copy()
    else:
        # Same orientation, so every target voxel axis maps to the same source axis.
        axes = []
        for a in range(3):
            t = np.arange(target.dims[a]) * target.spacing[a]
            sign = _AXIS_OF_CODE[target.orientation[a]][1]
            world_axis = _AXIS_OF_CODE[target.orientation[a]][0]
            shift = sign * (target.origin[world_axis] - src.grid.origin[world_axis])
            axes.append((shift + t) / src.grid.spacing[a])
        if mode == "nearest":
            out = _sample_nearest(data, axes)
        else:
            out = _sample_trilinear(data, axes)
    if isinstance(src, ScalarVolume):
        return ScalarVolume(target, out, src.kind)
    return LabelVolume(target, out, src.names)


def _sample_nearest(data: np.ndarray, axes) -> np.ndarray:
    idx, valid = [], []
    for a, c in enumerate(axes):
        i = np.floor(c + 0.5).astype(np.int64)
        ok = (i >= 0) & (i < data.shape[a])
        idx.append(np.where(ok, i, 0))
        valid.append(ok)
    out = data[np.ix_(*idx)]
    keep = valid[0][:, None, None] & valid[1][None, :, None] & valid[2][None, None, :]
    return np.where(keep, out, 0).astype(data.dtype)


def _sample_trilinear(data: np.ndarray, axes, tol: float = 1e-9) -> np.ndarray:
    lo, hi, w, valid = [], [], [], []
    for a, c in enumerate(axes):
        n = data.shape[a]
        ok = (c >= -tol) & (c <= n - 1 + tol)
        cc = np.clip(c, 0, n - 1)
        i0 = np.floor(cc).astype(np.int64)
        i1 = np.minimum(i0 + 1, n - 1)
        lo.append(i0)
        hi.append(i1)
        w.append(cc - i0)
        valid.append(ok)
    out = np.zeros((len(axes[0]), len(axes[1]), len(axes[2])))
    for bx in (0, 1):
        for by in (0, 1):
            for bz in (0, 1):
                ix = hi[0] if bx else lo[0]
                iy = hi[1] if by else lo[1]
                iz = hi[2] if bz else lo[2]
                wx = w[0] if bx else 1 - w[0]
                wy = w[1] if by else 1 - w[1]
                wz = w[2] if bz else 1 - w[2]
                weight = wx[:, None, None] * wy[None, :, None] * wz[None, None, :]
                out += weight * data[np.ix_(ix, iy, iz)]
    keep = valid[0][:, None, None] & valid[1][None, :, None] & valid[2][None, None, :]
    return np.where(keep, out, 0.0)


_STRUCTURE_RANK = {6: 1, 18: 2, 26: 3}


def structure(connectivity: int) -> np.ndarray:
    if connectivity not in _STRUCTURE_RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, _STRUCTURE_RANK[connectivity])


def label_components(mask: np.ndarray, connectivity: int = 26) -> tuple[np.ndarray, int]:
    return ndimage.label(np.asarray(mask, dtype=bool), structure=structure(connectivity))


def connected_components(mask: LabelVolume, connectivity: int = 26) -> list[VoxelSet]:
    """Split a binary mask into connected components.

    Components are ordered by descending voxel count, ties by their smallest
    linear index.
    """
    if not mask.is_binary():
        raise ValueError("connected_components needs a binary (0/1) mask")
    labeled, n = label_components(mask.labels, connectivity)
    if n == 0:
        return []
    flat = labeled.ravel()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n + 1)
    starts = np.cumsum(counts)[:-1]
    groups = np.split(order, starts)[1:]
    sets = [VoxelSet(mask.grid, g) for g in groups]
    sets.sort(key=lambda s: (-len(s), int(s.indices[0])))
    return sets


def overlap_count(a: VoxelSet, b: VoxelSet) -> int:
    if a.grid != b.grid:
        raise GridMismatchError("voxel sets live on different grids")
    return int(np.intersect1d(a.indices, b.indices, assume_unique=True).size)


def volume_ml(s: VoxelSet, g: Grid3 | None = None) -> float:
    g = s.grid if g is None else g
    if len(s) and s.indices[-1] >= g.size:
        raise IndexError("voxel set does not fit the grid")
    return len(s) * g.voxel_volume_ml


def same_grid(*grids: Grid3, what: str = "volumes") -> None:
    first = grids[0]
    for g in grids[1:]:
        if g != first:
            raise GridMismatchError(f"{what} are on different grids: {first.dims} vs {g.dims}")


def merge_label_maps(maps: Sequence[LabelVolume]) -> dict[str, np.ndarray]:
    """Name -> boolean mask for every named label across several label maps."""
    out: dict[str, np.ndarray] = {}
    for lv in maps:
        for label, name in lv.names.items():
            m = lv.labels == label
            out[name] = out[name] | m if name in out else m
    return out
