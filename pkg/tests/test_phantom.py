import json

import numpy as np
import pytest

from lymphstage import nifti, phantom
from lymphstage.normalization import compute_liver_stats
from lymphstage.phantom import PhantomSpec, PhantomSpecError, PlantedLesion, generate, parse_phantom_spec
from lymphstage.regions import RegionId
from lymphstage.staging import Group, Stage


def test_deterministic_for_seed():
    spec = PhantomSpec(lesions=(PlantedLesion("NeckL"), PlantedLesion("liver")), seed=5)
    a, b = generate(spec), generate(spec)
    assert np.array_equal(a.pet.values, b.pet.values)
    assert np.array_equal(a.lesion_mask.labels, b.lesion_mask.labels)
    assert a.truth_dict() == b.truth_dict()
    c = generate(PhantomSpec(lesions=spec.lesions, seed=6))
    assert not np.array_equal(a.pet.values, c.pet.values)


def test_truth_examples(base_phantom):
    assert base_phantom.expected.stage is Stage.NoInvolvement
    assert not base_phantom.lesion_mask.labels.any()
    ph = generate(PhantomSpec(lesions=(PlantedLesion("NeckL"),), seed=1))
    assert ph.truth.involved == {RegionId.NeckL} and ph.expected.stage is Stage.I
    assert ph.expected.group is Group.Limited
    ph = generate(PhantomSpec(lesions=(PlantedLesion("spine"),), seed=1))
    assert ph.truth.extranodal and ph.expected.stage is Stage.IV
    ph = generate(PhantomSpec(lesions=(PlantedLesion(phantom.EXTRACORPOREAL),), seed=1))
    assert ph.expected.stage is Stage.NoInvolvement and ph.lesion_mask.labels.any()


def test_lesion_values():
    ph = generate(PhantomSpec(lesions=(PlantedLesion("AxillaR", radius_mm=20, peak_suv=9.5),), seed=2))
    les = ph.resolved_lesions[0]
    assert les.peak_suv == 9.5 and les.radius_mm == 20
    m = ph.lesion_mask.labels > 0
    assert np.all(ph.pet.values[m] == 9.5)
    x, y, z = (ph.pet.grid.world_axis(i) for i in range(3))
    c = les.center
    inside = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2 <= 400
    assert np.array_equal(np.broadcast_to(inside, m.shape), m)


def test_liver_stats_recovered(base_phantom):
    s = compute_liver_stats(base_phantom.pet, base_phantom.organs.mask("liver"))
    assert s.mean_suv == pytest.approx(1.5, rel=0.02)
    assert s.std_suv == pytest.approx(0.2, rel=0.02)
    ph = generate(PhantomSpec(seed=3, liver_mean=2.4, liver_std=0.35))
    s = compute_liver_stats(ph.pet, ph.organs.mask("liver"))
    assert s.mean_suv == pytest.approx(2.4, rel=0.02) and s.std_suv == pytest.approx(0.35, rel=0.02)


def test_bad_lesions():
    with pytest.raises(ValueError, match="outside"):
        generate(PhantomSpec(lesions=(PlantedLesion("NeckL", center=(5000.0, 0.0, 0.0)),)))
    with pytest.raises(ValueError, match="positive"):
        generate(PhantomSpec(lesions=(PlantedLesion("NeckL", radius_mm=0),)))
    with pytest.raises(ValueError, match="anchor"):
        generate(PhantomSpec(lesions=(PlantedLesion("pancreas"),)))


def test_standard_suite_shape():
    suite = phantom.standard_suite()
    assert len(suite) == 20 and len({s.name for s in suite}) == 20
    assert [s.seed for s in suite] == list(range(100, 120))


SPEC = """
name: tiny   # comment
seed: 9
liver_suv: 2.0, 0.1
layout: none
grid
  dims: 20, 20, 20
  spacing: 5, 5, 5
  origin: -50, -50, 0
shape
  name: liver
  kind: box
  lo: -40, -40, 10
  hi: 0, 0, 60
shape
  name: body_trunc
  kind: ellipsoid
  map: body
  center: 0, 0, 50
  radii: 48, 48, 48
lesion
  target: NeckL
  center: 20, 20, 50
  radius: 8
  suv: 7
"""


def test_parse_spec():
    spec = parse_phantom_spec(SPEC)
    assert spec.name == "tiny" and spec.seed == 9 and (spec.liver_mean, spec.liver_std) == (2.0, 0.1)
    assert spec.grid.dims == (20, 20, 20) and spec.grid.spacing == (5.0, 5.0, 5.0)
    assert [s.name for s in spec.layout] == ["liver", "body_trunc"]
    assert spec.lesions == (PlantedLesion("NeckL", (20.0, 20.0, 50.0), 8.0, 7.0),)
    ph = generate(spec)
    assert ph.organs.mask("liver").sum() == 9 * 9 * 11  # box bounds are inclusive of voxel centres on the edges
    assert ph.expected.stage is Stage.I


@pytest.mark.parametrize("text,match", [
    ("colour: red\n", "unknown key"),
    ("lesion\n  center: 1, 2, 3\n", "no target"),
    ("shape\n  name: x\n  kind: box\n", "lacks"),
    ("  seed: 3\n", "outside a block"),
    ("seed: abc\n", "line 1"),
    ("lesion\n  target: NeckL\n  center: 1, 2\n", "expected 3"),
    ("grid\n  dims: 0, 4, 4\n", "dims"),
    ("layout: fancy\n", "layout"),
    ("banana\n", "block keyword"),
])
def test_spec_errors(text, match):
    with pytest.raises(PhantomSpecError, match=match):
        parse_phantom_spec(text)


def test_write_phantom(tmp_path):
    ph = generate(parse_phantom_spec(SPEC))
    paths = phantom.write_phantom(ph, tmp_path)
    pet = nifti.read_scalar(paths["pet"])
    assert pet.grid == ph.pet.grid and np.allclose(pet.values, ph.pet.values)
    organs = nifti.read_labels(paths["organs"])
    assert np.array_equal(organs.mask("liver"), ph.organs.mask("liver"))
    truth = json.loads(paths["truth"].read_text())
    assert truth["staging"]["stage"] == "I" and truth["involvement"] == ph.truth.to_dict()
