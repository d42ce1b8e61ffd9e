"""NIfTI-1 reading and writing for :mod:`lymphstage.volume` types."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import nibabel as nib
import numpy as np

from .volume import Grid3, LabelVolume, ScalarVolume, VolumeKind

_CODE_FOR_AXIS = {(0, 1): "R", (0, -1): "L", (1, 1): "A", (1, -1): "P", (2, 1): "S", (2, -1): "I"}


class NiftiError(ValueError):
    pass


def grid_from_affine(affine: np.ndarray, dims, tol: float = 1e-4) -> Grid3:
    """Build a grid from a NIfTI affine. Only axis-aligned affines (a scaled
    signed permutation) are accepted."""
    affine = np.asarray(affine, dtype=float)
    rot = affine[:3, :3]
    spacing = np.linalg.norm(rot, axis=0)
    if np.any(spacing <= 0):
        raise NiftiError("affine has a zero-length voxel axis")
    direction = rot / spacing
    if not np.allclose(direction.T @ direction, np.eye(3), atol=tol):
        raise NiftiError("non-orthogonal affine: voxel axes are sheared")
    codes = []
    for col in range(3):
        world = int(np.argmax(np.abs(direction[:, col])))
        if abs(abs(direction[world, col]) - 1.0) > tol:
            raise NiftiError("oblique affine: voxel axes are not aligned with the RAS axes")
        codes.append(_CODE_FOR_AXIS[(world, int(np.sign(direction[world, col])))])
    return Grid3(tuple(int(d) for d in dims[:3]), tuple(spacing), tuple(affine[:3, 3]), tuple(codes))


def _load(path) -> tuple[Grid3, np.ndarray, nib.Nifti1Image]:
    path = Path(path)
    try:
        img = nib.load(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:  # nibabel raises a zoo of error types
        raise NiftiError(f"cannot read {path}: {exc}") from exc
    if len(img.shape) == 4 and img.shape[3] == 1:
        data = np.asanyarray(img.dataobj)[..., 0]
    elif len(img.shape) == 3:
        data = np.asanyarray(img.dataobj)
    else:
        raise NiftiError(f"{path} is not a 3D volume (shape {img.shape})")
    grid = grid_from_affine(img.affine, img.shape)
    return grid, data, img


def read_scalar(path, kind: VolumeKind | str = VolumeKind.SUV) -> ScalarVolume:
    grid, data, img = _load(path)
    values = np.asarray(img.get_fdata(dtype=np.float64)).reshape(grid.dims)
    return ScalarVolume(grid, values, VolumeKind(kind))


def _names_path(path: Path) -> Path:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return path.with_name(name + ".labels.json")


def read_labels(path, names: Mapping[int, str] | None = None) -> LabelVolume:
    """Read an integer label map.

    Label names come from ``names`` or, failing that, from a sidecar
    ``<stem>.labels.json`` next to the image. Unnamed labels are called
    ``label_<id>``.
    """
    path = Path(path)
    grid, data, _ = _load(path)
    arr = np.rint(np.asarray(data, dtype=np.float64)).astype(np.int32)
    if names is None:
        sidecar = _names_path(path)
        names = {}
        if sidecar.exists():
            names = {int(k): v for k, v in json.loads(sidecar.read_text()).items()}
    names = dict(names)
    for v in np.unique(arr):
        if v != 0 and int(v) not in names:
            names[int(v)] = f"label_{int(v)}"
    return LabelVolume(grid, arr, names)


def _header(dtype) -> nib.Nifti1Header:
    h = nib.Nifti1Header()
    h.set_data_dtype(dtype)
    h.set_xyzt_units("mm")
    return h


def write_scalar(vol: ScalarVolume, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = nib.Nifti1Image(vol.values.astype(np.float32), vol.grid.affine, _header(np.float32))
    img.set_qform(vol.grid.affine, code=1)
    img.set_sform(vol.grid.affine, code=1)
    nib.save(img, str(path))
    return path


def write_labels(vol: LabelVolume, path, sidecar: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dtype = np.uint8 if (vol.labels.size == 0 or vol.labels.max() < 256) else np.int16
    img = nib.Nifti1Image(vol.labels.astype(dtype), vol.grid.affine, _header(dtype))
    img.set_qform(vol.grid.affine, code=1)
    img.set_sform(vol.grid.affine, code=1)
    nib.save(img, str(path))
    if sidecar and vol.names:
        _names_path(path).write_text(json.dumps({str(k): v for k, v in sorted(vol.names.items())}, indent=2))
    return path
