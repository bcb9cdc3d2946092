import json
import math

import numpy as np
import pytest

from atlasfuse.io import write_any
from atlasfuse.phantoms import DeformSpec, GlobalSpec, PhantomSpec, generate_phantom
from atlasfuse.pipeline import (METHODS, CaseConfig, CaseInputs, emit_report, make_folds,
                                metric_table, percent, read_manifest, run_case, run_crossval, timing_table,
                                write_case_outputs)
from atlasfuse.volume import ContractError

FAST_REG = {"pyramid_levels": [2, 1], "rigid_iters": 30, "affine_iters": 30, "deform_iters": 40}
FAST_FIT = {"iters": 10, "n_pseudo_queries": 1, "aug": {"max_disp_vox": 2.0, "smooth_sigma_vox": 4.0}}


def cfg(**kw):
    base = dict(registration=FAST_REG, fit=FAST_FIT,
                backend={"kind": "oracle", "oracle": {"corruption": {"erode_r": 1}}})
    base.update(kw)
    return CaseConfig(**base)


@pytest.fixture(scope="module")
def case():
    ph = generate_phantom(PhantomSpec("two-organ", (24, 24, 24), noise_sigma=0.01,
                                      deform=DeformSpec(2.0, 4.0, 1), misalign=GlobalSpec(shift_vox=(1, 0, 0))))
    return CaseInputs(ph.atlas_img, ph.atlas_mask, ph.query_img, ph.query_gt)


@pytest.fixture(scope="module")
def full(case):
    return run_case(cfg(), case, "c0")


def test_full_run_shapes(full, case):
    assert not full.error
    assert full.contexts == [1, 2]
    assert set(full.metrics) == set(METHODS)
    for lab in (1, 2):
        c = full.per_context[lab]
        assert c.m_final.geometry.same_as(case.query_img.geometry)
        assert 0.0 <= c.gain.values.min() and c.gain.values.max() <= 1.0
        assert c.fit_report["selected"] in ("fitted", "fm_only", "atlas_only")
    assert set(full.timings) == {"registration", "foundation_model", "fusion"}


def test_deterministic(full, case):
    again = run_case(cfg(), case, "c0")
    for lab in (1, 2):
        assert np.array_equal(again.per_context[lab].m_final.labels, full.per_context[lab].m_final.labels)
        assert again.per_context[lab].params == full.per_context[lab].params
    assert again.metrics == full.metrics


def test_ablation_modes_match_sources(case, full):
    a = run_case(cfg(mode="atlas_only"), case)
    f = run_case(cfg(mode="fm_only"), case)
    for lab in (1, 2):
        assert np.array_equal(a.per_context[lab].m_final.labels, full.per_context[lab].m_atlas.labels)
        assert np.array_equal(f.per_context[lab].m_final.labels,
                              (full.per_context[lab].m_fm.values >= 0.5).astype(np.int32))
    assert a.metrics["fused"] == a.metrics["atlas_deform"]
    assert f.metrics["fused"] == f.metrics["fm_only"]


def test_stage_toggles_change_atlas_rows(case):
    r = run_case(cfg(registration={**FAST_REG, "enable_rigid": False, "enable_affine": False,
                                   "enable_deform": False}, mode="atlas_only"), case)
    assert r.metrics["atlas_deform"] == r.metrics["atlas_none"]


def test_contexts_subset(case):
    r = run_case(cfg(contexts=[2], mode="atlas_only"), case)
    assert r.contexts == [2] and list(r.per_context) == [2]


def test_missing_file_is_case_error(tmp_path):
    r = run_case(CaseConfig(atlas_image=str(tmp_path / "nope.nii"), atlas_mask="x", query_image="y"))
    assert r.error and not r.per_context


def test_fixed_params(case):
    r = run_case(cfg(fusion_source="fixed", fixed_w=[0] * 6, fixed_b=40.0), case)
    assert all(r.per_context[lab].fit_report["selected"] == "fixed" for lab in (1, 2))
    assert r.metrics["fused"] == r.metrics["atlas_deform"]


def test_config_validation():
    with pytest.raises(ContractError):
        CaseConfig(mode="both")
    with pytest.raises(ContractError):
        CaseConfig(fusion_source="guess")
    assert CaseConfig(seed=9).fit.aug.seed == 9


def test_folds_partition():
    ids = [f"c{i:02d}" for i in range(13)]
    folds = make_folds(ids, 5, seed=4)
    seen = [q for f in folds for q in f["queries"]]
    assert sorted(seen) == ids and len(folds) == 5
    for f in folds:
        assert f["support"] not in f["queries"] and f["support"] in ids
    assert folds == make_folds(list(reversed(ids)), 5, seed=4)
    assert make_folds(ids[:3], 5)[0]["queries"] and len(make_folds(ids[:3], 5)) == 3
    with pytest.raises(ContractError):
        make_folds(["only"], 5)


def test_percent_cells():
    assert percent(0.8122) == "81.22"
    assert percent(math.nan) == "n/a"


def test_empty_report_is_header_only(tmp_path):
    assert metric_table([], "dice") == "method,Mean\n"
    assert timing_table([]) == "stage,min_per_image\n"
    emit_report([], tmp_path)
    assert (tmp_path / "cases.csv").read_text().count("\n") == 1


def test_report_files_and_json(tmp_path, full):
    written = emit_report([full], tmp_path, folds=[{"fold": 0, "queries": ["c0"], "support": "s"}])
    assert "report.json" in written and "table_dice.csv" in written
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["contexts"] == [1, 2] and doc["methods"] == list(METHODS)
    d = doc["summary"]["fused"]["1"]["dice"]["mean"]
    assert d == pytest.approx(full.metrics["fused"][1]["dice"])
    lines = (tmp_path / "table_dice.csv").read_text().splitlines()
    assert lines[0] == "method,context_1,context_2,Mean" and len(lines) == 1 + len(METHODS)
    t = timing_table([full]).splitlines()
    assert [row.split(",")[0] for row in t] == ["stage", "Total", "- Registration", "- Foundation model",
                                                "- Fusion"]


def test_case_outputs(tmp_path, full):
    write_case_outputs(full, tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"m_atlas.nii.gz", "m_final.nii.gz", "m_fm_1.nii.gz", "gain_2.nii.gz", "fusion_params.json",
            "affine.json", "loss_trace.csv"} <= names
    params = json.loads((tmp_path / "fusion_params.json").read_text())
    assert set(params) == {"1", "2"} and len(params["1"]["w"]) == 6


def test_combined_earlier_context_wins(full):
    m = full.combined("m_final").labels
    both = (full.per_context[1].m_final.labels > 0) & (full.per_context[2].m_final.labels > 0)
    assert np.all(m[both] == 1)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds")
    items = []
    for i in range(3):
        ph = generate_phantom(PhantomSpec("two-organ", (24, 24, 24), deform=DeformSpec(2.0, 4.0, i)))
        write_any(ph.query_img, str(d / f"img{i}.nii.gz"))
        write_any(ph.query_gt, str(d / f"gt{i}.nii.gz"))
        items.append({"id": f"c{i}", "image": f"img{i}.nii.gz", "gt": f"gt{i}.nii.gz", "contexts": [1, 2]})
    (d / "manifest.json").write_text(json.dumps(items))
    return d / "manifest.json"


def test_manifest_validation(tmp_path, dataset):
    m = read_manifest(dataset)
    assert [e["id"] for e in m] == ["c0", "c1", "c2"]
    (tmp_path / "bad.json").write_text(json.dumps([{"id": "a", "image": "x.nii"}]))
    with pytest.raises(ContractError):
        read_manifest(tmp_path / "bad.json")


def test_crossval(dataset):
    c = cfg(mode="atlas_only")
    folds, results = run_crossval(read_manifest(dataset), c, n_folds=3)
    assert [r.case_id for r in results] == ["c0", "c1", "c2"]
    assert all(not r.error for r in results)
    for r in results:
        fold = folds[r.fold]
        assert r.case_id in fold["queries"] and fold["support"] != r.case_id
    again = run_crossval(read_manifest(dataset), c, n_folds=3)
    assert again[0] == folds
    assert [r.metrics for r in again[1]] == [r.metrics for r in results]
