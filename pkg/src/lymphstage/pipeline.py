"""
Single-patient pipeline (segment/normalize, atlas, localize, stage, and an
optional evaluation against a reference row), its configuration, and a batch
wrapper that fans patients out to worker processes.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from . import __version__, nifti
from .atlas import LandmarkSet, RuleSyntaxError, build_atlas, load_default_rules, parse_rules
from .evaluation import CI_METHODS, ReferenceTableError, binary_metrics, ConfusionCounts, read_reference_csv
from .localization import ExtranodalConfig, build_involvement, localize_lesion
from .normalization import LiverStatsError, compute_liver_stats, liver_normalize
from .regions import REGIONS
from .segmentation import SegmentationConfig, threshold_segment
from .staging import stage
from .volume import GridMismatchError, LabelVolume, ScalarVolume, VolumeKind, connected_components, resample

log = logging.getLogger(__name__)

NORMALIZATION_MODES = ("zscore", "ratio", "none")


class PipelineError(Exception):
    """A failure in one pipeline stage, tagged with a stable error class."""

    def __init__(self, stage: str, error_class: str, message: str, partial: Mapping | None = None):
        super().__init__(f"[{stage}] {error_class}: {message}")
        self.stage = stage
        self.error_class = error_class
        self.message = message
        self.partial = dict(partial or {})

    def to_dict(self) -> dict:
        return {"stage": self.stage, "error_class": self.error_class, "message": self.message}


@dataclass(frozen=True)
class PipelineConfig:
    patient_id: str = "patient"
    pet: str | None = None
    ct: str | None = None
    landmarks: tuple[str, ...] = ()
    lesion_mask: str | None = None
    rules: str | None = None
    reference: str | None = None
    output_dir: str = "."
    normalization: str = "zscore"
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    extranodal: ExtranodalConfig = field(default_factory=ExtranodalConfig)
    ci_method: str = "clopper-pearson"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "landmarks", tuple(str(p) for p in self.landmarks))
        if self.normalization not in NORMALIZATION_MODES:
            raise ValueError(f"normalization must be one of {NORMALIZATION_MODES}, got {self.normalization!r}")
        if self.ci_method not in CI_METHODS:
            raise ValueError(f"ci_method must be one of {sorted(CI_METHODS)}, got {self.ci_method!r}")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "to_dict"):
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        kw = dict(d)
        if "segmentation" in kw and not isinstance(kw["segmentation"], SegmentationConfig):
            kw["segmentation"] = SegmentationConfig(**kw["segmentation"])
        if "extranodal" in kw and not isinstance(kw["extranodal"], ExtranodalConfig):
            kw["extranodal"] = ExtranodalConfig.from_dict(kw["extranodal"])
        if "landmarks" in kw:
            lm = kw["landmarks"]
            kw["landmarks"] = (lm,) if isinstance(lm, str) else tuple(lm or ())
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        """Read a YAML or JSON config (JSON is valid YAML)."""
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"config {path} must be a mapping")
        return cls.from_dict(data)

    def dump(self, path) -> Path:
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        else:
            path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path

    def merged(self, **overrides) -> "PipelineConfig":
        """Copy with every non-None override applied."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


@dataclass
class PatientInputs:
    pet: ScalarVolume
    landmarks: Sequence[LabelVolume]
    ct: ScalarVolume | None = None
    lesion_mask: LabelVolume | None = None


def dumps_report(report: Mapping) -> str:
    """Canonical JSON: sorted keys, shortest round-trip floats."""
    return json.dumps(_plain(report), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_rules(path: str | None):
    try:
        return load_default_rules() if path is None else parse_rules(Path(path).read_text())
    except RuleSyntaxError as exc:
        raise PipelineError("atlas", "rule-syntax", str(exc)) from exc
    except OSError as exc:
        raise PipelineError("atlas", "input-missing", str(exc)) from exc


def _on_grid(vol, grid, mode):
    return vol if vol.grid == grid else resample(vol, grid, mode)


def process_patient(inputs: PatientInputs, cfg: PipelineConfig, rules=None) -> dict:
    """Run every stage in memory and return the report dict.

    Raises PipelineError carrying whatever report fields were completed.
    """
    rules = rules if rules is not None else load_rules(cfg.rules)
    report: dict = {"patient_id": cfg.patient_id, "tool": {"name": "lymphstage", "version": __version__},
                    "rule_hash": rules.source_hash, "config": cfg.to_dict()}
    grid = inputs.pet.grid
    report["grid"] = grid.to_dict()

    def fail(stage_name, cls, msg):
        return PipelineError(stage_name, cls, msg, report)

    try:
        maps = [_on_grid(lv, grid, "nearest") for lv in inputs.landmarks]
        lesion_in = None if inputs.lesion_mask is None else _on_grid(inputs.lesion_mask, grid, "nearest")
    except GridMismatchError as exc:
        raise fail("load", "grid-mismatch", str(exc)) from exc
    landmarks = LandmarkSet.from_label_maps(maps) if maps else LandmarkSet(grid, {})

    # normalize
    petnorm = None
    if cfg.normalization != "none":
        liver = landmarks.get("liver")
        try:
            if liver is None:
                raise LiverStatsError("no 'liver' label in the landmark maps")
            stats = compute_liver_stats(inputs.pet, liver)
        except LiverStatsError as exc:
            raise fail("normalize", "liver-stats-unavailable", str(exc)) from exc
        petnorm = liver_normalize(inputs.pet, stats, cfg.normalization)
        report["liver_stats"] = stats.to_dict()
    else:
        report["liver_stats"] = None
    report["normalization"] = cfg.normalization

    # segment
    seg = cfg.segmentation
    if lesion_in is not None:
        lesion_mask = LabelVolume.binary(grid, lesion_in.labels > 0, "lesion")
        source = "external"
    elif seg.mode == "external":
        raise fail("segment", "lesion-mask-missing", "segmentation mode 'external' needs a lesion mask")
    else:
        lesion_mask = threshold_segment(inputs.pet, petnorm, seg)
        source = "threshold"
    components = connected_components(lesion_mask, seg.connectivity)
    report["segmentation"] = {"source": source, "foreground_voxels": int(lesion_mask.labels.astype(bool).sum()),
                              "components": len(components)}

    # atlas
    atlas = build_atlas(rules, landmarks, grid)
    manifest = atlas.manifest()
    report["atlas"] = {"region_voxels": {k: v["voxels"] for k, v in manifest["regions"].items()},
                       "overlap_voxels_resolved": manifest["overlap_voxels_resolved"],
                       "warnings": manifest["warnings"]}

    # localize
    lesions = [localize_lesion(i + 1, vs, atlas, maps, cfg.extranodal, inputs.pet.values)
               for i, vs in enumerate(components)]
    kept = [les for les in lesions if not les.extracorporeal]
    report["lesions"] = [les.to_dict() for les in lesions]
    report["excluded_lesions"] = [les.id for les in lesions if les.extracorporeal]

    # stage
    profile = build_involvement(kept)
    result = stage(profile)
    report["involvement"] = profile.to_dict()
    report["staging"] = result.to_dict()

    if cfg.reference is not None:
        try:
            report["evaluation"] = _evaluate_single(cfg, profile, result)
        except PipelineError as exc:
            raise fail(exc.stage, exc.error_class, exc.message) from exc
    return report


def _evaluate_single(cfg: PipelineConfig, profile, result) -> dict:
    try:
        ref = read_reference_csv(Path(cfg.reference))
    except (OSError, ReferenceTableError) as exc:
        raise PipelineError("evaluate", "reference-invalid", str(exc)) from exc
    row = ref.get(cfg.patient_id)
    if row is None:
        raise PipelineError("evaluate", "reference-missing-patient", f"no reference row for {cfg.patient_id!r}")
    c = [0, 0, 0, 0]
    for r in REGIONS:
        p, t = r in profile.involved, r in row.involved
        c[0 if p and t else 1 if p else 2 if t else 3] += 1
    counts = ConfusionCounts(*c)
    return {"reference_stage": row.stage.value, "stage_correct": row.stage is result.stage,
            "region_counts": counts.to_dict(),
            "region_metrics": binary_metrics(counts, cfg.ci_method, seed=cfg.seed).to_dict()}


def load_inputs(cfg: PipelineConfig) -> PatientInputs:
    if cfg.pet is None:
        raise PipelineError("load", "config-invalid", "no PET volume configured")
    paths = [cfg.pet, *cfg.landmarks] + [p for p in (cfg.ct, cfg.lesion_mask) if p]
    for p in paths:
        if not Path(p).exists():
            raise PipelineError("load", "input-missing", f"{p} does not exist")
    try:
        pet = nifti.read_scalar(cfg.pet, VolumeKind.SUV)
        ct = nifti.read_scalar(cfg.ct, VolumeKind.HU) if cfg.ct else None
        maps = [nifti.read_labels(p) for p in cfg.landmarks]
        lesion = nifti.read_labels(cfg.lesion_mask) if cfg.lesion_mask else None
    except (nifti.NiftiError, ValueError) as exc:
        raise PipelineError("load", "input-invalid", str(exc)) from exc
    return PatientInputs(pet, maps, ct, lesion)


def report_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.output_dir) / f"{cfg.patient_id}.report.json"


def run_pipeline(cfg: PipelineConfig) -> tuple[dict, int]:
    """Run one patient from files and write its report.

    Returns ``(report, exit_status)``. On failure the written report holds
    the completed stages plus an ``error`` object; the status is nonzero.
    """
    out = report_path(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        inputs = load_inputs(cfg)
        report = process_patient(inputs, cfg)
        report["inputs"] = {name: _sha256(p) for name, p in
                            [("pet", cfg.pet), ("ct", cfg.ct), ("lesion_mask", cfg.lesion_mask)] if p}
        report["inputs"]["landmarks"] = [_sha256(p) for p in cfg.landmarks]
        status = 0
    except PipelineError as exc:
        log.error("%s", exc)
        report = {"patient_id": cfg.patient_id, "config": cfg.to_dict(), **exc.partial, "error": exc.to_dict()}
        status = 1
    out.write_text(dumps_report(report))
    return report, status


def _run_one(cfg: PipelineConfig) -> tuple[str, int, str]:
    _, status = run_pipeline(cfg)
    return cfg.patient_id, status, str(report_path(cfg))


def run_batch(configs: Sequence[PipelineConfig], workers: int = 1) -> list[tuple[str, int, str]]:
    """Run several patients, each isolated; results come back in input order."""
    ids = [c.patient_id for c in configs]
    if len(set(ids)) != len(ids):
        raise ValueError("patient ids in a batch must be unique")
    if workers <= 1 or len(configs) <= 1:
        return [_run_one(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, configs))
