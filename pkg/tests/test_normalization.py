import numpy as np
import pytest

from lymphstage.normalization import (LiverStatsError, LiverStats, compute_liver_stats, denormalize,
                                      liver_normalize)
from lymphstage.volume import Grid3, LabelVolume, ScalarVolume, VolumeKind

G = Grid3((10, 10, 10), (1, 1, 1))


def _pet(values):
    return ScalarVolume(G, values, VolumeKind.SUV)


def _liver(n=200, start=0):
    m = np.zeros(G.size, bool)
    m[start:start + n] = True
    return m.reshape(G.dims)


def test_constant_liver():
    v = np.full(G.dims, 2.0)
    s = compute_liver_stats(_pet(v), _liver())
    assert (s.mean_suv, s.std_suv, s.voxel_count) == (2.0, 0.0, 200)


def test_three_values_population_std():
    v = np.zeros(G.dims)
    m = np.zeros(G.dims, bool)
    m.flat[[3, 50, 700]] = True
    v.flat[[3, 50, 700]] = [1.0, 2.0, 3.0]
    s = compute_liver_stats(_pet(v), m, min_voxels=1)
    assert s.mean_suv == pytest.approx(2.0)
    assert s.std_suv == pytest.approx(np.sqrt(2 / 3))


def test_label_volume_mask_accepted(rng):
    v = rng.random(G.dims) * 3
    lv = LabelVolume.binary(G, _liver(), "liver")
    assert compute_liver_stats(_pet(v), lv) == compute_liver_stats(_pet(v), _liver())


def test_empty_and_small_liver_rejected():
    v = np.ones(G.dims)
    with pytest.raises(LiverStatsError, match="empty"):
        compute_liver_stats(_pet(v), np.zeros(G.dims, bool))
    with pytest.raises(LiverStatsError, match="minimum"):
        compute_liver_stats(_pet(v), _liver(99))
    compute_liver_stats(_pet(v), _liver(100))


def test_normalize_arithmetic():
    v = np.zeros(G.dims)
    v[0, 0, 0] = 4.5
    v[0, 0, 1] = 2.0
    out = liver_normalize(_pet(v), LiverStats(2.0, 0.5, 100))
    assert out.kind is VolumeKind.SUVNORM
    assert out.values[0, 0, 0] == pytest.approx(5.0)
    assert out.values[0, 0, 1] == 0.0
    assert liver_normalize(_pet(v), LiverStats(2.0, 0.5, 100), "ratio").values[0, 0, 0] == pytest.approx(2.25)


def test_degenerate_std_rejected():
    with pytest.raises(LiverStatsError):
        liver_normalize(_pet(np.ones(G.dims)), LiverStats(1.0, 1e-7, 100))
    with pytest.raises(ValueError):
        liver_normalize(_pet(np.ones(G.dims)), LiverStats(1.0, 1.0, 100), "log")


def test_self_consistency_and_roundtrip(rng):
    v = rng.gamma(2.0, 1.0, G.dims)
    liver = _liver(400, 100)
    stats = compute_liver_stats(_pet(v), liver)
    norm = liver_normalize(_pet(v), stats)
    z = norm.values[liver]
    assert abs(z.mean()) < 1e-6 and abs(z.std() - 1) < 1e-6
    back = denormalize(norm, stats)
    np.testing.assert_allclose(back.values, v, rtol=1e-6, atol=1e-12)


def test_order_preserved_and_stats_invariances(rng):
    v = rng.gamma(2.0, 1.0, G.dims)
    liver = _liver(300)
    stats = compute_liver_stats(_pet(v), liver)
    norm = liver_normalize(_pet(v), stats).values
    sub = rng.choice(G.size, 50, replace=False)
    assert np.argmax(v.flat[sub]) == np.argmax(norm.flat[sub])
    assert np.array_equal(np.argsort(v.flat[sub], kind="stable"), np.argsort(norm.flat[sub], kind="stable"))
    # zero voxels outside the mask do not change the stats
    v2 = v.copy()
    v2[~liver] = 0.0
    assert compute_liver_stats(_pet(v2), liver) == stats
    # voxel ordering: permute liver values within the mask
    v3 = v.copy()
    vals = v3[liver]
    v3[liver] = vals[rng.permutation(vals.size)]
    s3 = compute_liver_stats(_pet(v3), liver)
    assert s3.mean_suv == pytest.approx(stats.mean_suv, rel=1e-12)
    assert s3.std_suv == pytest.approx(stats.std_suv, rel=1e-12)
