import json

import pytest
from click.testing import CliRunner

from lymphstage import nifti, phantom
from lymphstage.cli import main
from lymphstage.evaluation import ReferenceRow, write_reference_csv
from lymphstage.localization import ExtranodalConfig
from lymphstage.phantom import PhantomSpec, PlantedLesion
from lymphstage.pipeline import (PatientInputs, PipelineConfig, PipelineError, process_patient, run_batch,
                                 run_pipeline)
from lymphstage.regions import RegionId
from lymphstage.segmentation import SegmentationConfig
from lymphstage.staging import Stage, stage_regions


@pytest.fixture(scope="module")
def case(tmp_path_factory):
    """A stage III phantom (NeckL + Spleen) on disk."""
    root = tmp_path_factory.mktemp("case")
    ph = phantom.generate(PhantomSpec(lesions=(PlantedLesion("NeckL"), PlantedLesion("Spleen")), seed=21))
    paths = phantom.write_phantom(ph, root / "data")
    return ph, paths, root


def _cfg(paths, out, **kw):
    return PipelineConfig(patient_id=kw.pop("patient_id", "p1"), pet=str(paths["pet"]), ct=str(paths["ct"]),
                          landmarks=(str(paths["organs"]), str(paths["body"])), output_dir=str(out), **kw)


def _flags(paths, out, pid="p1"):
    return ["--patient-id", pid, "--pet", str(paths["pet"]), "--landmarks", str(paths["organs"]),
            "--landmarks", str(paths["body"]), "--output-dir", str(out)]


# ---------------------------------------------------------------- config

def test_config_roundtrip(tmp_path):
    cfg = PipelineConfig(patient_id="x", pet="a.nii", landmarks=("l1", "l2"), normalization="ratio",
                         segmentation=SegmentationConfig(suv_threshold=3.0, combine="and"),
                         extranodal=ExtranodalConfig(min_voxels=5), ci_method="wald", seed=4)
    for name in ("c.yaml", "c.json"):
        assert PipelineConfig.load(cfg.dump(tmp_path / name)) == cfg
    assert PipelineConfig.from_dict({"landmarks": "one.nii"}).landmarks == ("one.nii",)
    with pytest.raises(ValueError, match="unknown"):
        PipelineConfig.from_dict({"colour": 1})
    with pytest.raises(ValueError):
        PipelineConfig(normalization="minmax")
    assert cfg.merged(seed=None, patient_id="y").seed == 4


# ---------------------------------------------------------------- pipeline

def test_pipeline_matches_truth(case, tmp_path):
    ph, paths, _ = case
    report, status = run_pipeline(_cfg(paths, tmp_path))
    assert status == 0
    assert report["staging"]["stage"] == ph.expected.stage.value == "III"
    assert set(report["involvement"]["involved"]) == {"NeckL", "Spleen"}
    assert report["segmentation"]["components"] == 2 and report["segmentation"]["source"] == "threshold"
    assert report["liver_stats"]["mean_suv"] == pytest.approx(1.5, rel=0.05)
    written = json.loads((tmp_path / "p1.report.json").read_text())
    assert written["staging"] == report["staging"] and len(written["inputs"]["landmarks"]) == 2


def test_reports_are_byte_identical(case, tmp_path):
    _, paths, _ = case
    cfg = _cfg(paths, tmp_path)
    run_pipeline(cfg)
    first = (tmp_path / "p1.report.json").read_bytes()
    run_pipeline(cfg)
    assert (tmp_path / "p1.report.json").read_bytes() == first


def test_external_mask_and_reference(case, tmp_path):
    ph, paths, _ = case
    ref = tmp_path / "ref.csv"
    write_reference_csv([ReferenceRow("p1", frozenset({RegionId.NeckL}), False, Stage.I)], ref)
    report, status = run_pipeline(_cfg(paths, tmp_path, lesion_mask=str(paths["lesion_mask"]), reference=str(ref),
                                       segmentation=SegmentationConfig(mode="external")))
    assert status == 0 and report["segmentation"]["source"] == "external"
    ev = report["evaluation"]
    assert ev["reference_stage"] == "I" and ev["stage_correct"] is False
    assert ev["region_counts"] == {"tp": 1, "fp": 1, "fn": 0, "tn": 19}


def test_missing_liver(case, tmp_path):
    ph, paths, _ = case
    inputs = PatientInputs(ph.pet, [ph.body], ph.ct)
    with pytest.raises(PipelineError) as ei:
        process_patient(inputs, PipelineConfig())
    assert ei.value.error_class == "liver-stats-unavailable" and ei.value.stage == "normalize"
    assert "grid" in ei.value.partial
    report = process_patient(inputs, PipelineConfig(normalization="none"))
    assert report["liver_stats"] is None and "staging" in report

    cfg = PipelineConfig(patient_id="nl", pet=str(paths["pet"]), landmarks=(str(paths["body"]),),
                         output_dir=str(tmp_path))
    report, status = run_pipeline(cfg)
    assert status == 1 and report["error"]["error_class"] == "liver-stats-unavailable"
    assert json.loads((tmp_path / "nl.report.json").read_text())["error"]["stage"] == "normalize"


def test_pipeline_input_errors(case, tmp_path):
    _, paths, _ = case
    report, status = run_pipeline(PipelineConfig(pet=str(tmp_path / "nope.nii"), output_dir=str(tmp_path)))
    assert status == 1 and report["error"]["error_class"] == "input-missing"
    report, status = run_pipeline(_cfg(paths, tmp_path, segmentation=SegmentationConfig(mode="external")))
    assert status == 1 and report["error"]["error_class"] == "lesion-mask-missing"
    report, status = run_pipeline(_cfg(paths, tmp_path, reference=str(tmp_path / "missing.csv")))
    assert status == 1 and report["error"]["error_class"] == "reference-invalid"
    assert report["staging"]["stage"] == "III"  # completed stages survive in the error report


def test_batch(case, tmp_path):
    _, paths, _ = case
    cfgs = [_cfg(paths, tmp_path, patient_id="a"), _cfg(paths, tmp_path, patient_id="b"),
            PipelineConfig(patient_id="c", pet=str(tmp_path / "missing.nii"), output_dir=str(tmp_path))]
    results = run_batch(cfgs, workers=2)
    assert [(pid, st) for pid, st, _ in results] == [("a", 0), ("b", 0), ("c", 1)]
    assert (tmp_path / "a.report.json").read_bytes() == (tmp_path / "b.report.json").read_bytes().replace(
        b'"patient_id": "b"', b'"patient_id": "a"')
    with pytest.raises(ValueError, match="unique"):
        run_batch(cfgs[:1] * 2)


# ---------------------------------------------------------------- CLI

def test_cli_stage(tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["stage", "-"], input=json.dumps({"involved": ["NeckL", "Spleen"]}))
    assert res.exit_code == 0
    out = json.loads(res.output)
    assert (out["stage"], out["group"]) == ("III", "Advanced")
    res = runner.invoke(main, ["stage", "-"], input="{nope")
    assert res.exit_code == 1


def test_cli_pipeline_and_error_json(case, tmp_path):
    _, paths, _ = case
    runner = CliRunner()
    res = runner.invoke(main, ["pipeline", *_flags(paths, tmp_path), "--seed", "3"])
    assert res.exit_code == 0, res.output
    assert "stage III (Advanced)" in res.output
    assert json.loads((tmp_path / "p1.report.json").read_text())["config"]["seed"] == 3
    res = runner.invoke(main, ["pipeline", "--pet", str(paths["pet"]), "--landmarks", str(paths["body"]),
                               "--output-dir", str(tmp_path)])
    assert res.exit_code == 1
    err = json.loads(res.stderr.strip().splitlines()[-1])
    assert err["error_class"] == "liver-stats-unavailable"
    cfg_path = _cfg(paths, tmp_path / "fromcfg").dump(tmp_path / "c.yaml")
    res = runner.invoke(main, ["pipeline", "--config", str(cfg_path), "--normalization", "ratio"])
    assert res.exit_code == 0
    assert json.loads((tmp_path / "fromcfg/p1.report.json").read_text())["normalization"] == "ratio"


def test_cli_segment_atlas_localize(case, tmp_path):
    ph, paths, _ = case
    runner = CliRunner()
    seg = tmp_path / "seg.nii.gz"
    res = runner.invoke(main, ["segment", "--pet", str(paths["pet"]), "--landmarks", str(paths["organs"]),
                               "--out", str(seg)])
    assert res.exit_code == 0, res.output
    assert "2 components" in res.output
    atlas = tmp_path / "atlas.nii.gz"
    res = runner.invoke(main, ["atlas", "--landmarks", str(paths["organs"]), "--landmarks", str(paths["body"]),
                               "--out", str(atlas)])
    assert res.exit_code == 0, res.output
    man = json.loads((tmp_path / "atlas.manifest.json").read_text())
    assert len(man["regions"]) == 21
    assert len(nifti.read_labels(atlas).names) == 21
    res = runner.invoke(main, ["localize", "--lesion-mask", str(seg), "--landmarks", str(paths["organs"]),
                               "--landmarks", str(paths["body"]), "--pet", str(paths["pet"])])
    assert res.exit_code == 0, res.output
    out = json.loads(res.output)
    assert set(out["involvement"]["involved"]) == {"NeckL", "Spleen"}
    assert all(les["suv_max"] > 5 for les in out["lesions"])


def _write_cohort(pred_dir, ref_path, pairs):
    rows = []
    pred_dir.mkdir(parents=True, exist_ok=True)
    for i, (truth, pred) in enumerate(pairs):
        pid = f"p{i:03d}"
        rows.append(ReferenceRow(pid, frozenset(RegionId(r) for r in truth), False, stage_regions(truth).stage))
        (pred_dir / f"{pid}.json").write_text(json.dumps({"patient_id": pid, "involved": pred}))
    write_reference_csv(rows, ref_path)


def test_cli_evaluate(tmp_path):
    adv, lim = ["NeckL", "Spleen"], ["NeckL"]
    pairs = [(adv, adv)] * 38 + [(lim, adv)] * 2 + [(adv, lim)] * 8 + [(lim, lim)] * 19
    _write_cohort(tmp_path / "pred", tmp_path / "ref.csv", pairs)
    runner = CliRunner()
    res = runner.invoke(main, ["evaluate", "--predictions", str(tmp_path / "pred"), "--reference",
                               str(tmp_path / "ref.csv"), "--out-dir", str(tmp_path / "ev")])
    assert res.exit_code == 0, res.output
    assert "accuracy 85.07" in res.output
    for name in ("evaluation.json", "region_table.csv", "confusion.txt", "confusion.png"):
        assert (tmp_path / "ev" / name).stat().st_size > 0
    ev = json.loads((tmp_path / "ev/evaluation.json").read_text())
    assert ev["limited_vs_advanced"]["counts"] == {"tp": 38, "fp": 2, "fn": 8, "tn": 19}


def test_cli_evaluate_self_and_empty(tmp_path):
    pairs = [(["NeckL"], ["NeckL"]), (["NeckL", "NeckR"], ["NeckL", "NeckR"]),
             (["NeckL", "Spleen"], ["NeckL", "Spleen"])]
    _write_cohort(tmp_path / "pred", tmp_path / "ref.csv", pairs)
    runner = CliRunner()
    res = runner.invoke(main, ["evaluate", "--predictions", str(tmp_path / "pred"), "--reference",
                               str(tmp_path / "ref.csv"), "--out-dir", str(tmp_path / "ev"), "--no-plot"])
    assert res.exit_code == 0, res.output
    assert json.loads((tmp_path / "ev/evaluation.json").read_text())["staging"]["weighted_kappa"] == 1.0
    assert not (tmp_path / "ev/confusion.png").exists()
    (tmp_path / "empty").mkdir()
    res = runner.invoke(main, ["evaluate", "--predictions", str(tmp_path / "empty"), "--reference",
                               str(tmp_path / "ref.csv"), "--out-dir", str(tmp_path / "ev2")])
    assert res.exit_code == 1 and json.loads(res.stderr)["error_class"] == "no-predictions"


def test_cli_phantom(tmp_path):
    spec = tmp_path / "s.txt"
    spec.write_text("name: one\nseed: 2\nlesion\n  target: AxillaL\n")
    runner = CliRunner()
    res = runner.invoke(main, ["phantom", str(spec), "--out", str(tmp_path / "o")])
    assert res.exit_code == 0, res.output
    assert json.loads((tmp_path / "o/truth.json").read_text())["staging"]["stage"] == "I"
    spec.write_text("bogus\n")
    res = runner.invoke(main, ["phantom", str(spec), "--out", str(tmp_path / "o")])
    assert res.exit_code == 1 and json.loads(res.stderr)["error_class"] == "spec-invalid"
    res = runner.invoke(main, ["phantom", "--out", str(tmp_path / "o")])
    assert res.exit_code == 1
