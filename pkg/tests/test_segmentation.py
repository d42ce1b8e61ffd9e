import logging

import numpy as np
import pytest

from lymphstage import nifti
from lymphstage.normalization import LiverStats, compute_liver_stats, liver_normalize
from lymphstage.segmentation import (SegmentationConfig, import_lesion_mask, remove_small_components,
                                     threshold_segment)
from lymphstage.volume import Grid3, LabelVolume, ScalarVolume, VolumeKind, connected_components, label_components

G = Grid3((16, 16, 16), (2, 2, 2))


def _pet(v):
    return ScalarVolume(G, v, VolumeKind.SUV)


def test_config_validation():
    for bad in (dict(mode="nn"), dict(combine="xor"), dict(min_lesion_voxels=0), dict(connectivity=8),
                dict(suv_threshold=float("inf"))):
        with pytest.raises(ValueError):
            SegmentationConfig(**bad)


def test_all_zero_pet_is_empty():
    pet = _pet(np.zeros(G.dims))
    norm = liver_normalize(pet, LiverStats(2.0, 0.5, 100))
    assert not threshold_segment(pet, norm).labels.any()


def test_four_voxel_blob_exact():
    v = np.full(G.dims, 0.5)
    blob = np.zeros(G.dims, bool)
    blob[5, 5, 5:9] = True
    v[blob] = 8.0
    pet = _pet(v)
    norm = liver_normalize(pet, LiverStats(2.0, 0.5, 100))
    out = threshold_segment(pet, norm)
    assert np.array_equal(out.labels.astype(bool), blob)
    assert out.names == {1: "lesion"}


def test_size_filter_boundary():
    v = np.zeros(G.dims)
    v[2, 2, 2:4] = 8.0  # two voxels
    v[10, 10, 10:13] = 8.0  # three voxels
    out = threshold_segment(_pet(v), None, SegmentationConfig(min_lesion_voxels=3)).labels.astype(bool)
    assert not out[2, 2, 2:4].any() and out[10, 10, 10:13].all()


def test_size_filter_respects_connectivity():
    m = np.zeros(G.dims, bool)
    m[1, 1, 1] = m[2, 2, 2] = m[3, 3, 3] = True  # a diagonal chain
    assert remove_small_components(m, 3, 26).sum() == 3
    assert remove_small_components(m, 3, 6).sum() == 0


def test_size_filter_removes_exactly_small_components(rng):
    for _ in range(30):
        m = rng.random(G.dims) < 0.08
        k = int(rng.integers(1, 6))
        lab, n = label_components(m, 26)
        sizes = np.bincount(lab.ravel())
        expected = np.isin(lab, [i for i in range(1, n + 1) if sizes[i] >= k])
        assert np.array_equal(remove_small_components(m, k, 26), expected)


def test_combine_or():
    v = np.zeros(G.dims)
    v[0, 0, 0:3] = 2.6
    pet = _pet(v)
    z = ScalarVolume(G, np.zeros(G.dims), VolumeKind.SUVNORM)
    assert threshold_segment(pet, z, SegmentationConfig(combine="or")).labels.sum() == 3
    assert threshold_segment(pet, z, SegmentationConfig(combine="and")).labels.sum() == 0


def test_monotone_in_suv_threshold(rng):
    v = rng.gamma(1.5, 1.5, G.dims)
    pet = _pet(v)
    liver = np.zeros(G.dims, bool)
    liver[:8] = True
    norm = liver_normalize(pet, compute_liver_stats(pet, liver))
    prev = None
    for t in np.linspace(0.5, 8, 12):
        cur = threshold_segment(pet, norm, SegmentationConfig(suv_threshold=t)).labels.astype(bool)
        if prev is not None:
            assert not (cur & ~prev).any()
        prev = cur


def test_znorm_only_is_affine_invariant(rng):
    v = rng.gamma(1.5, 1.5, G.dims)
    liver = np.zeros(G.dims, bool)
    liver[:8] = True
    cfg = SegmentationConfig(suv_threshold=-np.finfo(float).max)
    ref = None
    for a, b in [(1.0, 0.0), (2.5, 0.0), (0.3, 1.7), (7.0, 4.0)]:
        pet = _pet(a * v + b)
        norm = liver_normalize(pet, compute_liver_stats(pet, liver))
        out = threshold_segment(pet, norm, cfg).labels.astype(bool)
        if ref is None:
            ref = out
            assert ref.any()
        assert np.array_equal(out, ref)


def test_import_mask_binarizes_and_roundtrips(tmp_path, caplog):
    arr = np.zeros(G.dims, dtype=int)
    arr[3:6, 3:6, 3:6] = 7
    p = nifti.write_labels(LabelVolume(G, arr, {7: "lesion7"}), tmp_path / "m.nii.gz")
    out = import_lesion_mask(p, G)
    assert np.array_equal(out.labels, (arr > 0).astype(out.labels.dtype))
    assert [len(c) for c in connected_components(out)] == [27]
    empty = nifti.write_labels(LabelVolume(G, np.zeros(G.dims, int), {}), tmp_path / "e.nii.gz")
    with caplog.at_level(logging.WARNING):
        assert not import_lesion_mask(empty, G).labels.any()
    assert "no foreground" in caplog.text


def test_import_mask_resamples_to_target(tmp_path):
    coarse = Grid3((8, 8, 8), (4, 4, 4), (-1.0, -1.0, -1.0))
    arr = np.zeros(coarse.dims, dtype=int)
    arr[2, 2, 2] = 1
    p = nifti.write_labels(LabelVolume(coarse, arr, {1: "lesion"}), tmp_path / "c.nii.gz")
    out = import_lesion_mask(p, G)
    assert out.grid == G
    assert out.labels.sum() == 8  # one 4 mm voxel covers a 2x2x2 block of 2 mm voxels


def test_phantom_mask_roundtrip(tmp_path):
    from lymphstage import phantom
    ph = phantom.generate(phantom.PhantomSpec(lesions=(phantom.PlantedLesion("NeckL"),), seed=2))
    p = nifti.write_labels(ph.lesion_mask, tmp_path / "les.nii.gz")
    back = import_lesion_mask(p, ph.pet.grid)
    assert np.array_equal(back.labels.astype(bool), ph.lesion_mask.labels.astype(bool))
