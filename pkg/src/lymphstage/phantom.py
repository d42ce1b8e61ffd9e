"""
Synthetic PET/CT/landmark phantoms with planted lesions.

The default layout is a schematic, upright human in RAS+ world millimetres
(feet at z = 0, head near z = 1700) on a 128^3 grid. It carries every landmark
the shipped region rules reference, plus one anchor point per nodal region
that lies well inside that region, so lesions planted at anchors have a known
region by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .regions import RegionId
from .staging import InvolvementProfile, StagingResult, stage
from .volume import Grid3, LabelVolume, ScalarVolume, VolumeKind

DEFAULT_GRID = Grid3((128, 128, 128), (5.0, 3.5, 14.0), (-317.5, -222.25, 0.0), ("R", "A", "S"))

EXTRACORPOREAL = "extracorporeal"


@dataclass(frozen=True)
class Shape:
    name: str
    kind: str  # box | ellipsoid | cylinder
    a: tuple[float, ...]  # box: lo corner; ellipsoid: center; cylinder: (cx, cy, z_lo)
    b: tuple[float, ...]  # box: hi corner; ellipsoid: radii;  cylinder: (rx, ry, z_hi)
    map: str = "organs"  # organs | body

    def mask(self, grid: Grid3) -> np.ndarray:
        x, y, z = (grid.world_axis(i) for i in range(3))
        if self.kind == "box":
            (x0, y0, z0), (x1, y1, z1) = self.a, self.b
            m = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1) & (z >= z0) & (z <= z1)
        elif self.kind == "ellipsoid":
            (cx, cy, cz), (rx, ry, rz) = self.a, self.b
            m = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 <= 1.0
        elif self.kind == "cylinder":
            (cx, cy, z0), (rx, ry, z1) = self.a, self.b
            m = (((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0) & (z >= z0) & (z <= z1)
        else:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        return np.broadcast_to(m, grid.dims)


def _mirror(s: Shape) -> Shape:
    name = s.name.replace("_left", "_right")
    if s.kind == "box":
        (x0, y0, z0), (x1, y1, z1) = s.a, s.b
        return Shape(name, s.kind, (-x1, y0, z0), (-x0, y1, z1), s.map)
    (cx, cy, cz) = s.a
    return Shape(name, s.kind, (-cx, cy, cz), s.b, s.map)


def _paired(*shapes: Shape) -> list[Shape]:
    out = []
    for s in shapes:
        out += [s, _mirror(s)]
    return out


def default_layout() -> list[Shape]:
    body = [
        Shape("body_extremities", "box", (-285, -50, 880), (-195, 50, 1450), "body"),
        Shape("body_extremities", "box", (195, -50, 880), (285, 50, 1450), "body"),
        Shape("body_extremities", "box", (-165, -80, 40), (-35, 80, 830), "body"),
        Shape("body_extremities", "box", (35, -80, 40), (165, 80, 830), "body"),
        Shape("body_trunc", "cylinder", (0, 0, 820), (205, 115, 1460), "body"),
        Shape("body_trunc", "box", (-65, -60, 1440), (65, 60, 1580), "body"),
        Shape("body_trunc", "ellipsoid", (0, 0, 1650), (90, 105, 115), "body"),
    ]
    organs = [
        Shape("liver", "ellipsoid", (85, 10, 1060), (100, 80, 80)),
        Shape("spleen", "ellipsoid", (-115, -35, 1075), (35, 35, 45)),
        *_paired(Shape("kidney_left", "ellipsoid", (-70, -60, 990), (28, 22, 45))),
        *_paired(Shape("lung_left", "ellipsoid", (-110, -5, 1290), (50, 70, 130))),
        Shape("heart", "ellipsoid", (-10, 40, 1200), (50, 40, 50)),
        Shape("aorta", "box", (-20, -40, 1160), (5, -15, 1380)),
        Shape("pulmonary_artery", "box", (-30, 10, 1260), (25, 30, 1290)),
        Shape("trachea", "box", (-10, -5, 1300), (10, 15, 1520)),
        Shape("pharynx", "ellipsoid", (0, 25, 1560), (15, 15, 40)),
        Shape("mandible", "box", (-50, 40, 1580), (50, 80, 1610)),
        Shape("spine", "box", (-15, -80, 880), (15, -50, 1580)),
        *_paired(
            Shape("clavicle_left", "box", (-175, 25, 1440), (-20, 45, 1460)),
            Shape("humerus_left", "box", (-250, -10, 1150), (-230, 10, 1440)),
            Shape("ulna_left", "box", (-250, -10, 890), (-230, 10, 1140)),
            Shape("hip_left", "box", (-150, -50, 800), (-30, 20, 880)),
            Shape("femur_left", "box", (-115, -15, 460), (-85, 15, 790)),
            Shape("tibia_left", "box", (-115, -10, 80), (-85, 20, 440)),
        ),
    ]
    return body + organs


# One (center, radius) per target. Region anchors sit well inside the
# corresponding region of the shipped rules; organ anchors inside the organ.
_LEFT_ANCHORS = {
    "NeckL": ((-45, -20, 1500), 15),
    "InfraclavicularL": ((-120, 45, 1421), 14),
    "AxillaL": ((-195, 0, 1370), 15),
    "TrochleaL": ((-262, 20, 1148), 13),
    "HilumL": ((-45, 20, 1275), 12),
    "ParaIliacL": ((-90, 50, 840), 15),
    "GroinL": ((-100, 45, 740), 15),
    "PoplitealL": ((-100, -45, 450), 15),
}
DEFAULT_ANCHORS: dict[str, tuple[tuple[float, float, float], float]] = {
    "WaldeyersRing": ((0, 25, 1560), 12),
    "Mediastinum": ((0, 55, 1300), 15),
    "Spleen": ((-115, -35, 1075), 16),
    "UpperAbdomen": ((-40, 20, 1080), 15),
    "LowerAbdomen": ((0, 40, 930), 15),
    "liver": ((85, 10, 1060), 20),
    "lung_left": ((-110, -5, 1290), 20),
    "lung_right": ((110, -5, 1290), 20),
    "spine": ((0, -65, 1200), 14),
    "femur_left": ((-100, 0, 625), 14),
    "femur_right": ((100, 0, 625), 14),
    EXTRACORPOREAL: ((260, 150, 600), 15),
}
for _name, ((_x, _y, _z), _r) in _LEFT_ANCHORS.items():
    DEFAULT_ANCHORS[_name] = ((_x, _y, _z), _r)
    DEFAULT_ANCHORS[_name[:-1] + "R"] = ((-_x, _y, _z), _r)

_HU = {"lung": -800, "liver": 60, "spleen": 50, "kidney": 35, "heart": 40, "aorta": 45,
       "pulmonary_artery": 45, "trachea": -900, "pharynx": -300}
_BONES = ("spine", "clavicle", "humerus", "ulna", "hip", "femur", "tibia", "mandible")


def _hu_for(name: str) -> float:
    if name.startswith(_BONES):
        return 700.0
    for prefix, hu in _HU.items():
        if name.startswith(prefix):
            return float(hu)
    return 40.0


@dataclass(frozen=True)
class PlantedLesion:
    target: str  # RegionId value, organ name, or "extracorporeal"
    center: tuple[float, float, float] | None = None
    radius_mm: float | None = None
    peak_suv: float | None = None


@dataclass(frozen=True)
class PhantomSpec:
    grid: Grid3 = DEFAULT_GRID
    lesions: tuple[PlantedLesion, ...] = ()
    layout: tuple[Shape, ...] = field(default_factory=lambda: tuple(default_layout()))
    anchors: dict = field(default_factory=lambda: dict(DEFAULT_ANCHORS))
    background_suv: float = 0.8
    air_suv: float = 0.05
    liver_mean: float = 1.5
    liver_std: float = 0.2
    seed: int = 0
    name: str = "phantom"


@dataclass
class Phantom:
    spec: PhantomSpec
    pet: ScalarVolume
    ct: ScalarVolume
    organs: LabelVolume
    body: LabelVolume
    lesion_mask: LabelVolume
    truth: InvolvementProfile
    expected: StagingResult

    def truth_dict(self) -> dict:
        return {"name": self.spec.name, "seed": self.spec.seed, "involvement": self.truth.to_dict(),
                "staging": self.expected.to_dict(),
                "lesions": [{"target": les.target, "center": list(les.center), "radius_mm": les.radius_mm,
                             "peak_suv": les.peak_suv} for les in self.resolved_lesions]}

    resolved_lesions: list = field(default_factory=list)


def _rasterize(grid: Grid3, shapes: Sequence[Shape], which: str) -> LabelVolume:
    labels = np.zeros(grid.dims, dtype=np.int32)
    ids: dict[str, int] = {}
    for s in shapes:
        if s.map != which:
            continue
        label = ids.setdefault(s.name, len(ids) + 1)
        labels[s.mask(grid)] = label
    return LabelVolume(grid, labels, {v: k for k, v in ids.items()})


def _target_kind(target: str) -> str:
    if target == EXTRACORPOREAL:
        return "extracorporeal"
    try:
        RegionId(target)
        return "region"
    except ValueError:
        return "organ"


def generate(spec: PhantomSpec) -> Phantom:
    """Deterministically build PET (SUV), CT (HU), landmark maps, the planted
    lesion mask, and the ground-truth involvement and stage."""
    grid = spec.grid
    rng = np.random.default_rng(spec.seed)
    organs = _rasterize(grid, spec.layout, "organs")
    body = _rasterize(grid, spec.layout, "body")
    in_body = body.labels > 0

    ct = np.where(in_body, 40.0, -1000.0)
    for label, name in organs.names.items():
        ct[organs.labels == label] = _hu_for(name)

    pet = np.where(in_body, spec.background_suv, spec.air_suv).astype(np.float64)
    liver = organs.mask("liver")
    pet[liver] = np.clip(rng.normal(spec.liver_mean, spec.liver_std, int(liver.sum())), 0.0, None)

    x, y, z = (grid.world_axis(i) for i in range(3))
    lesion_mask = np.zeros(grid.dims, dtype=bool)
    lo = grid.index_to_world(np.zeros(3))
    hi = grid.index_to_world(np.asarray(grid.dims) - 1)
    lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
    involved: set[RegionId] = set()
    extranodal = False
    resolved = []
    for les in spec.lesions:
        anchor = spec.anchors.get(les.target)
        center = les.center if les.center is not None else (anchor[0] if anchor else None)
        if center is None:
            raise ValueError(f"lesion target {les.target!r} has no anchor; give an explicit center")
        radius = les.radius_mm if les.radius_mm is not None else (anchor[1] if anchor else 15.0)
        peak = les.peak_suv if les.peak_suv is not None else float(rng.uniform(6.0, 12.0))
        if radius <= 0:
            raise ValueError("lesion radius must be positive")
        c = np.asarray(center, dtype=float)
        if np.any(c - radius < lo) or np.any(c + radius > hi):
            raise ValueError(f"lesion at {tuple(center)} (radius {radius} mm) extends outside the grid")
        sphere = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2 <= radius ** 2
        if not sphere.any():
            raise ValueError(f"lesion at {tuple(center)} is smaller than one voxel")
        pet[sphere] = peak
        ct[sphere] = 45.0 if les.target != EXTRACORPOREAL else ct[sphere]
        lesion_mask |= sphere
        kind = _target_kind(les.target)
        if kind == "region":
            involved.add(RegionId(les.target))
        elif kind == "organ":
            extranodal = True
        resolved.append(PlantedLesion(les.target, tuple(float(v) for v in center), float(radius), peak))

    truth = InvolvementProfile(frozenset(involved), extranodal)
    ph = Phantom(spec, ScalarVolume(grid, pet, VolumeKind.SUV), ScalarVolume(grid, ct, VolumeKind.HU),
                 organs, body, LabelVolume.binary(grid, lesion_mask, "lesion"), truth, stage(truth))
    ph.resolved_lesions = resolved
    return ph


def write_phantom(ph: Phantom, out_dir) -> dict[str, Path]:
    from . import nifti

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "pet": nifti.write_scalar(ph.pet, out / "pet.nii.gz"),
        "ct": nifti.write_scalar(ph.ct, out / "ct.nii.gz"),
        "organs": nifti.write_labels(ph.organs, out / "organs.nii.gz"),
        "body": nifti.write_labels(ph.body, out / "body.nii.gz"),
        "lesion_mask": nifti.write_labels(ph.lesion_mask, out / "lesions.nii.gz"),
    }
    truth = out / "truth.json"
    truth.write_text(json.dumps(ph.truth_dict(), indent=2, sort_keys=True) + "\n")
    paths["truth"] = truth
    return paths


# --------------------------------------------------------------------------
# Spec files
# --------------------------------------------------------------------------

class PhantomSpecError(ValueError):
    pass


def _floats(value: str, n: int | None, line: int) -> tuple[float, ...]:
    parts = [p.strip().removesuffix("mm").strip() for p in value.split(",")]
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError:
        raise PhantomSpecError(f"line {line}: expected numbers, got {value!r}") from None
    if n is not None and len(vals) != n:
        raise PhantomSpecError(f"line {line}: expected {n} numbers, got {len(vals)}")
    return vals


def parse_phantom_spec(text: str) -> PhantomSpec:
    """Parse a phantom spec file.

    Top-level ``key: value`` lines set scalars (``name``, ``seed``,
    ``background_suv``, ``air_suv``, ``liver_suv: mean, std``,
    ``layout: default|none``). Blocks open with a bare ``grid``, ``lesion`` or
    ``shape`` line followed by indented ``key: value`` lines.
    """
    spec = PhantomSpec()
    lesions: list[PlantedLesion] = []
    shapes: list[Shape] = list(spec.layout)
    block: str | None = None
    cur: dict = {}
    grid_kw: dict = {}

    def close():
        nonlocal block, cur
        if block == "lesion":
            if "target" not in cur:
                raise PhantomSpecError(f"lesion block starting line {cur['_line']} has no target")
            lesions.append(PlantedLesion(cur["target"], cur.get("center"), cur.get("radius"), cur.get("suv")))
        elif block == "shape":
            try:
                shapes.append(Shape(cur["name"], cur["kind"], cur["a"], cur["b"], cur.get("map", "organs")))
            except KeyError as exc:
                raise PhantomSpecError(f"shape block starting line {cur['_line']} lacks {exc.args[0]!r}") from None
        block, cur = None, {}

    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        indented = line[0] in " \t"
        stripped = line.strip()
        if not indented:
            close()
            if stripped in ("grid", "lesion", "shape"):
                block, cur = stripped, {"_line": n}
                continue
            if ":" not in stripped:
                raise PhantomSpecError(f"line {n}: expected 'key: value' or a block keyword")
            key, value = (s.strip() for s in stripped.split(":", 1))
            if key == "name":
                spec = replace(spec, name=value)
            elif key == "seed":
                spec = replace(spec, seed=int(_floats(value, 1, n)[0]))
            elif key == "background_suv":
                spec = replace(spec, background_suv=_floats(value, 1, n)[0])
            elif key == "air_suv":
                spec = replace(spec, air_suv=_floats(value, 1, n)[0])
            elif key == "liver_suv":
                mean, std = _floats(value, 2, n)
                spec = replace(spec, liver_mean=mean, liver_std=std)
            elif key == "layout":
                if value == "none":
                    shapes = []
                elif value != "default":
                    raise PhantomSpecError(f"line {n}: layout must be 'default' or 'none'")
            else:
                raise PhantomSpecError(f"line {n}: unknown key {key!r}")
            continue
        if block is None:
            raise PhantomSpecError(f"line {n}: indented line outside a block")
        if ":" not in stripped:
            raise PhantomSpecError(f"line {n}: expected 'key: value'")
        key, value = (s.strip() for s in stripped.split(":", 1))
        if block == "grid":
            if key in ("dims", "spacing", "origin"):
                grid_kw[key] = _floats(value, 3, n)
            elif key == "orientation":
                grid_kw[key] = tuple(value.replace(",", "").replace(" ", ""))
            else:
                raise PhantomSpecError(f"line {n}: unknown grid key {key!r}")
        elif block == "lesion":
            if key == "target":
                cur["target"] = value
            elif key == "center":
                cur["center"] = _floats(value, 3, n)
            elif key == "radius":
                cur["radius"] = _floats(value, 1, n)[0]
            elif key == "suv":
                cur["suv"] = _floats(value, 1, n)[0]
            else:
                raise PhantomSpecError(f"line {n}: unknown lesion key {key!r}")
        else:
            if key in ("name", "kind", "map"):
                cur[key] = value
            elif key in ("lo", "center"):
                cur["a"] = _floats(value, 3, n)
            elif key in ("hi", "radii"):
                cur["b"] = _floats(value, 3, n)
            else:
                raise PhantomSpecError(f"line {n}: unknown shape key {key!r}")
    close()
    if grid_kw:
        base = DEFAULT_GRID
        try:
            grid = Grid3(tuple(int(v) for v in grid_kw.get("dims", base.dims)), grid_kw.get("spacing", base.spacing),
                         grid_kw.get("origin", base.origin), grid_kw.get("orientation", base.orientation))
        except ValueError as exc:
            raise PhantomSpecError(str(exc)) from None
        spec = replace(spec, grid=grid)
    return replace(spec, lesions=tuple(lesions), layout=tuple(shapes))


def standard_suite() -> list[PhantomSpec]:
    """Twenty phantoms covering stages I-IV, no involvement, extranodal-only
    disease and extracorporeal contamination."""
    cases = [
        ("no-lesions", []),
        ("stage1-neck", ["NeckL"]),
        ("stage1-spleen", ["Spleen"]),
        ("stage1-popliteal", ["PoplitealR"]),
        ("stage2-neck-mediastinum", ["NeckL", "Mediastinum"]),
        ("stage2-axilla-hilum", ["AxillaR", "InfraclavicularR", "HilumL"]),
        ("stage2-abdomen", ["UpperAbdomen", "LowerAbdomen", "ParaIliacL"]),
        ("stage2-legs", ["GroinL", "GroinR", "PoplitealL"]),
        ("stage3-neck-spleen", ["NeckR", "Spleen"]),
        ("stage3-waldeyer-iliac", ["WaldeyersRing", "ParaIliacR"]),
        ("stage3-trochlea-groin", ["TrochleaL", "TrochleaR", "GroinR"]),
        ("stage3-chest-abdomen", ["Mediastinum", "HilumR", "UpperAbdomen", "LowerAbdomen"]),
        ("stage4-liver-only", ["liver"]),
        ("stage4-lung-neck", ["lung_right", "NeckL"]),
        ("stage4-bone-nodes", ["femur_left", "Mediastinum", "Spleen"]),
        ("stage4-spine-only", ["spine"]),
        ("contamination-neck", [EXTRACORPOREAL, "NeckR"]),
        ("contamination-only", [EXTRACORPOREAL]),
        ("stage3-mixed", ["AxillaL", "PoplitealR", "InfraclavicularL"]),
        ("stage3-all-regions", [r.value for r in RegionId]),
    ]
    return [PhantomSpec(lesions=tuple(PlantedLesion(t) for t in targets), seed=100 + i, name=name)
            for i, (name, targets) in enumerate(cases)]
