"""Command-line entry point: one subcommand per pipeline stage.

Failures exit with status 1 and print a JSON object with ``error_class``,
``stage`` and ``message`` on stderr. Set ``LYMPHSTAGE_LOG_LEVEL`` (e.g.
``DEBUG``) to change log verbosity.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import click

from . import nifti, phantom
from .atlas import LandmarkSet, build_atlas
from .evaluation import CI_METHODS, ReferenceTableError, evaluate_cohort, plot_confusion, read_reference_csv
from .localization import ExtranodalConfig, build_involvement, localize_lesion
from .normalization import LiverStatsError, compute_liver_stats, liver_normalize
from .pipeline import (NORMALIZATION_MODES, PipelineConfig, PipelineError, dumps_report, load_rules, run_batch,
                       run_pipeline)
from .segmentation import threshold_segment
from .staging import InvolvementProfile, Stage, StagingResult, stage
from .volume import VolumeKind, connected_components, resample

log = logging.getLogger("lymphstage")


def _fail(stage_name: str, error_class: str, message: str):
    click.echo(json.dumps({"error_class": error_class, "stage": stage_name, "message": message}), err=True)
    sys.exit(1)


def _guard(stage_name: str):
    """Turn known exceptions into a JSON error line and exit status 1."""
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except PipelineError as exc:
                _fail(exc.stage, exc.error_class, exc.message)
            except nifti.NiftiError as exc:
                _fail(stage_name, "input-invalid", str(exc))
            except LiverStatsError as exc:
                _fail(stage_name, "liver-stats-unavailable", str(exc))
            except FileNotFoundError as exc:
                _fail(stage_name, "input-missing", str(exc))
            except (ValueError, KeyError) as exc:
                _fail(stage_name, "invalid-input", str(exc))
        return wrapper
    return deco


def _write_json(obj, out: str | None):
    text = dumps_report(obj)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


# Options shared by every command that needs a PipelineConfig. Each maps
# onto a config field and, when given, overrides the config file.
_SEG_FIELDS = {"seg_mode": "mode", "suv_threshold": "suv_threshold", "znorm_threshold": "znorm_threshold",
               "combine": "combine", "min_lesion_voxels": "min_lesion_voxels", "connectivity": "connectivity"}
_EXTRA_FIELDS = {"extranodal_min_voxels": "min_voxels", "extranodal_min_fraction": "min_fraction"}


def config_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="YAML or JSON PipelineConfig; flags override it."),
        click.option("--patient-id"),
        click.option("--pet", type=click.Path(), help="PET SUV NIfTI."),
        click.option("--ct", type=click.Path(), help="CT NIfTI (HU)."),
        click.option("--landmarks", multiple=True, type=click.Path(), help="Landmark label map (repeatable)."),
        click.option("--lesion-mask", type=click.Path(), help="External binary lesion mask."),
        click.option("--rules", type=click.Path(), help="Region rule file (default: shipped rules)."),
        click.option("--reference", type=click.Path(), help="Reference-standard CSV."),
        click.option("--output-dir", type=click.Path(file_okay=False)),
        click.option("--normalization", type=click.Choice(NORMALIZATION_MODES)),
        click.option("--seg-mode", type=click.Choice(["threshold", "external"])),
        click.option("--suv-threshold", type=float),
        click.option("--znorm-threshold", type=float),
        click.option("--combine", type=click.Choice(["and", "or"])),
        click.option("--min-lesion-voxels", type=int),
        click.option("--connectivity", type=click.Choice(["6", "18", "26"])),
        click.option("--extranodal-min-voxels", type=int),
        click.option("--extranodal-min-fraction", type=float),
        click.option("--ci-method", type=click.Choice(sorted(CI_METHODS))),
        click.option("--seed", type=int),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def build_config(config_path=None, **flags) -> PipelineConfig:
    try:
        cfg = PipelineConfig.load(config_path) if config_path else PipelineConfig()
        seg = {_SEG_FIELDS[k]: flags.pop(k) for k in list(flags) if k in _SEG_FIELDS}
        extra = {_EXTRA_FIELDS[k]: flags.pop(k) for k in list(flags) if k in _EXTRA_FIELDS}
        if seg.get("connectivity") is not None:
            seg["connectivity"] = int(seg["connectivity"])
        seg = {k: v for k, v in seg.items() if v is not None}
        extra = {k: v for k, v in extra.items() if v is not None}
        if not flags.get("landmarks"):
            flags["landmarks"] = None
        cfg = cfg.merged(**flags)
        if seg:
            cfg = replace(cfg, segmentation=replace(cfg.segmentation, **seg))
        if extra:
            cfg = replace(cfg, extranodal=replace(cfg.extranodal, **extra))
        return cfg
    except (ValueError, TypeError) as exc:
        _fail("config", "config-invalid", str(exc))


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Automated Lugano staging from PET/CT and landmark label maps."""
    logging.basicConfig(level=os.environ.get("LYMPHSTAGE_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@config_options
@click.option("--out", required=True, type=click.Path(), help="Output lesion mask NIfTI.")
@_guard("segment")
def segment(out, **flags):
    """Threshold PET into a binary lesion mask."""
    cfg = build_config(**flags)
    if cfg.pet is None:
        _fail("segment", "config-invalid", "--pet is required")
    pet = nifti.read_scalar(cfg.pet, VolumeKind.SUV)
    petnorm = None
    if cfg.normalization != "none":
        maps = [_on(nifti.read_labels(p), pet.grid) for p in cfg.landmarks]
        liver = LandmarkSet.from_label_maps(maps).get("liver") if maps else None
        if liver is None:
            _fail("normalize", "liver-stats-unavailable", "no 'liver' label in the landmark maps")
        petnorm = liver_normalize(pet, compute_liver_stats(pet, liver), cfg.normalization)
    mask = threshold_segment(pet, petnorm, cfg.segmentation)
    nifti.write_labels(mask, out)
    click.echo(f"{int(mask.labels.sum())} foreground voxels, "
               f"{len(connected_components(mask, cfg.segmentation.connectivity))} components -> {out}")


def _on(vol, grid):
    return vol if vol.grid == grid else resample(vol, grid, "nearest")


@main.command()
@click.option("--landmarks", multiple=True, required=True, type=click.Path(exists=True))
@click.option("--rules", type=click.Path(exists=True), help="Region rule file (default: shipped rules).")
@click.option("--reference-volume", type=click.Path(exists=True),
              help="Volume whose grid the atlas uses (default: first landmark map).")
@click.option("--out", required=True, type=click.Path(), help="Multi-label region NIfTI.")
@click.option("--manifest", type=click.Path(), help="JSON manifest path (default: next to --out).")
@_guard("atlas")
def atlas(landmarks, rules, reference_volume, out, manifest):
    """Build the 21-region nodal atlas."""
    maps = [nifti.read_labels(p) for p in landmarks]
    grid = nifti.read_scalar(reference_volume, VolumeKind.HU).grid if reference_volume else maps[0].grid
    maps = [_on(m, grid) for m in maps]
    result = build_atlas(load_rules(rules), maps, grid)
    nifti.write_labels(result.to_label_volume(), out)
    man = manifest or str(Path(out).with_name(Path(out).name.split(".")[0] + ".manifest.json"))
    _write_json(result.manifest(), man)
    click.echo(f"atlas -> {out}; manifest -> {man}")


@main.command()
@click.option("--lesion-mask", required=True, type=click.Path(exists=True))
@click.option("--landmarks", multiple=True, required=True, type=click.Path(exists=True))
@click.option("--pet", type=click.Path(exists=True), help="PET for SUVmax (optional).")
@click.option("--rules", type=click.Path(exists=True))
@click.option("--patient-id", default="patient")
@click.option("--connectivity", type=click.Choice(["6", "18", "26"]), default="26")
@click.option("--extranodal-min-voxels", type=int, default=ExtranodalConfig.min_voxels)
@click.option("--extranodal-min-fraction", type=float, default=ExtranodalConfig.min_fraction)
@click.option("--out", type=click.Path(), help="Output JSON (default: stdout).")
@_guard("localize")
def localize(lesion_mask, landmarks, pet, rules, patient_id, connectivity, extranodal_min_voxels,
             extranodal_min_fraction, out):
    """Assign lesions to regions and detect extranodal disease."""
    mask = nifti.read_labels(lesion_mask)
    grid = mask.grid
    maps = [_on(nifti.read_labels(p), grid) for p in landmarks]
    suv = None
    if pet:
        pet_vol = nifti.read_scalar(pet)
        if pet_vol.grid != grid:
            _fail("localize", "grid-mismatch", "PET and lesion mask grids differ")
        suv = pet_vol.values
    ruleset = load_rules(rules)
    at = build_atlas(ruleset, maps, grid)
    cfg = ExtranodalConfig(min_voxels=extranodal_min_voxels, min_fraction=extranodal_min_fraction)
    bin_mask = mask if mask.is_binary() else type(mask).binary(grid, mask.labels > 0, "lesion")
    lesions = [localize_lesion(i + 1, vs, at, maps, cfg, suv)
               for i, vs in enumerate(connected_components(bin_mask, int(connectivity)))]
    profile = build_involvement([les for les in lesions if not les.extracorporeal])
    _write_json({"patient_id": patient_id, "rule_hash": ruleset.source_hash, "extranodal_config": cfg.to_dict(),
                 "lesions": [les.to_dict() for les in lesions],
                 "excluded_lesions": [les.id for les in lesions if les.extracorporeal],
                 "involvement": profile.to_dict(), "atlas_warnings": at.warnings}, out)


def _profile_from_json(data: dict) -> InvolvementProfile:
    return InvolvementProfile.from_dict(data.get("involvement", data))


@main.command("stage")
@click.argument("involvement", type=click.Path(exists=True, allow_dash=True))
@click.option("--out", type=click.Path(), help="Output JSON (default: stdout).")
@_guard("stage")
def stage_cmd(involvement, out):
    """Stage an involvement profile JSON (``-`` reads stdin)."""
    text = sys.stdin.read() if involvement == "-" else Path(involvement).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        _fail("stage", "invalid-input", f"not valid JSON: {exc}")
    _write_json(stage(_profile_from_json(data)).to_dict(), out)


@main.command()
@config_options
@click.option("--batch", "batch_configs", multiple=True, type=click.Path(exists=True, dir_okay=False),
              help="Extra per-patient config files; runs all as a batch.")
@click.option("--workers", type=int, default=1, show_default=True)
def pipeline(batch_configs, workers, **flags):
    """Run the whole pipeline for one patient (or a batch) and write reports."""
    if batch_configs:
        overrides = {k: v for k, v in flags.items() if k != "config_path"}
        cfgs = [build_config(config_path=p, **overrides) for p in batch_configs]
        results = run_batch(cfgs, workers)
        for pid, status, path in results:
            click.echo(f"{pid}\t{'ok' if status == 0 else 'error'}\t{path}")
        sys.exit(1 if any(s for _, s, _ in results) else 0)
    cfg = build_config(**flags)
    report, status = run_pipeline(cfg)
    if status:
        err = report["error"]
        _fail(err["stage"], err["error_class"], err["message"])
    st = report["staging"]
    click.echo(f"{cfg.patient_id}: stage {st['stage']} ({st['group']}) -> "
               f"{Path(cfg.output_dir) / (cfg.patient_id + '.report.json')}")


def _load_predictions(directory: Path):
    preds = []
    for path in sorted(directory.glob("*.json")):
        data = json.loads(path.read_text())
        if "error" in data or "involvement" not in data and "involved" not in data:
            log.warning("skipping %s: no involvement profile", path)
            continue
        pid = data.get("patient_id", path.name.split(".")[0])
        profile = _profile_from_json(data)
        if "staging" in data:
            s = data["staging"]
            result = StagingResult(Stage(s["stage"]), stage(profile).group, s.get("rationale", {}))
        else:
            result = stage(profile)
        preds.append((pid, profile, result))
    return preds


@main.command()
@click.option("--predictions", required=True, type=click.Path(exists=True, file_okay=False),
              help="Directory of per-patient report or involvement JSON files.")
@click.option("--reference", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--ci-method", type=click.Choice(sorted(CI_METHODS)), default="clopper-pearson", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, help="Bootstrap seed for F1 intervals.")
@click.option("--no-plot", is_flag=True, help="Skip the confusion-matrix image.")
@_guard("evaluate")
def evaluate(predictions, reference, out_dir, ci_method, seed, no_plot):
    """Score predictions against a reference-standard CSV."""
    preds = _load_predictions(Path(predictions))
    if not preds:
        _fail("evaluate", "no-predictions", f"no prediction files in {predictions}")
    try:
        ref = read_reference_csv(Path(reference))
    except ReferenceTableError as exc:
        _fail("evaluate", "reference-invalid", str(exc))
    missing = sorted(pid for pid, _, _ in preds if pid not in ref)
    if missing:
        _fail("evaluate", "reference-missing-patient", f"no reference rows for {missing}")
    report = evaluate_cohort(preds, ref, ci_method, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(report.to_dict(), str(out / "evaluation.json"))
    (out / "region_table.csv").write_text(report.region_table_csv())
    (out / "confusion.txt").write_text(report.confusion_text())
    if not no_plot:
        plot_confusion(report, out / "confusion.png")
    g = report.group_metrics
    click.echo(report.confusion_text(), nl=False)
    click.echo(f"limited vs advanced: accuracy {g.accuracy.percent()}, sensitivity {g.recall.percent()}, "
               f"specificity {g.specificity.percent()}, macro-F1 {report.group_macro_f1.percent()}")


@main.command("phantom")
@click.argument("spec_file", type=click.Path(exists=True, dir_okay=False), required=False)
@click.option("--standard-suite", is_flag=True, help="Write the 20 built-in phantoms instead.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_guard("phantom")
def phantom_cmd(spec_file, standard_suite, out_dir):
    """Generate synthetic PET/CT/landmark volumes and truth JSON."""
    if bool(spec_file) == standard_suite:
        _fail("phantom", "invalid-input", "give exactly one of SPEC_FILE or --standard-suite")
    if standard_suite:
        specs = [(s.name, s) for s in phantom.standard_suite()]
        for name, spec in specs:
            phantom.write_phantom(phantom.generate(spec), Path(out_dir) / name)
            click.echo(f"{name} -> {Path(out_dir) / name}")
        return
    try:
        spec = phantom.parse_phantom_spec(Path(spec_file).read_text())
    except phantom.PhantomSpecError as exc:
        _fail("phantom", "spec-invalid", str(exc))
    ph = phantom.generate(spec)
    phantom.write_phantom(ph, out_dir)
    click.echo(f"{spec.name}: truth stage {ph.expected.stage.value} -> {out_dir}")


if __name__ == "__main__":
    main()
