import json
import os
import subprocess
import sys

import numpy as np
import pytest

from atlasfuse.cli import main
from atlasfuse.io import read_any

FAST = """
seed = 3
[case]
atlas_image = "ph/atlas.nii.gz"
atlas_mask = "ph/atlas_mask.nii.gz"
query_image = "ph/query.nii.gz"
query_gt = "ph/query_gt.nii.gz"
[registration]
pyramid_levels = [2, 1]
rigid_iters = 20
affine_iters = 20
deform_iters = 30
[fit]
iters = 10
n_pseudo_queries = 1
[backend]
kind = "oracle"
prompt_kind = "mask"
[backend.oracle.corruption]
erode_r = 1
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["phantom", "--kind", "two-organ", "--dims", "24", "--max-disp", "2", "--sigma", "4",
                 "--shift", "1", "0", "0", "--out", str(d / "ph")]) == 0
    (d / "fast.toml").write_text(FAST)
    (d / "oracle.json").write_text(json.dumps({"kind": "oracle", "oracle": {"corruption": {"erode_r": 1}}}))
    return d


def listing(d):
    return {os.path.relpath(os.path.join(r, f), d): open(os.path.join(r, f), "rb").read()
            for r, _, fs in os.walk(d) for f in fs}


def test_phantom_files(work):
    names = set(os.listdir(work / "ph"))
    assert {"atlas.nii.gz", "atlas_mask.nii.gz", "query.nii.gz", "query_gt.nii.gz", "true_affine.json",
            "phantom.json"} <= names
    assert read_any(str(work / "ph" / "query.nii.gz"), "volume").dims == (24, 24, 24)


def test_register_prompt_segment_fuse_eval(work):
    ph, d = work / "ph", work
    assert main(["register", "--atlas", str(ph / "atlas.nii.gz"), "--atlas-mask", str(ph / "atlas_mask.nii.gz"),
                 "--query", str(ph / "query.nii.gz"), "--iters", "20", "--out", str(d / "reg")]) == 0
    wm = str(d / "reg" / "warped_mask.nii.gz")
    assert main(["prompt", "--mask", wm, "--kind", "box", "--label", "1", "--out", str(d / "p.json")]) == 0
    assert json.loads((d / "p.json").read_text())["kind"] == "box"
    assert main(["segment-fm", "--backend", str(d / "oracle.json"), "--query", str(ph / "query.nii.gz"),
                 "--prompt", str(d / "p.json"), "--gt", str(ph / "query_gt.nii.gz"), "--label", "1",
                 "--out", str(d / "fm.nii.gz")]) == 0
    (d / "params.json").write_text(json.dumps({"w": [0] * 6, "b": 40.0}))
    assert main(["fuse", "--atlas-mask", wm, "--fm-mask", str(d / "fm.nii.gz"), "--params",
                 str(d / "params.json"), "--label", "1", "--out", str(d / "fused.nii.gz"),
                 "--gain-out", str(d / "gain.nii.gz")]) == 0
    fused = read_any(str(d / "fused.nii.gz"), "mask").labels
    assert np.array_equal(fused, (read_any(wm, "mask").labels == 1).astype(fused.dtype))
    assert main(["eval", "--pred", str(d / "fused.nii.gz"), "--gt", str(ph / "query_gt.nii.gz"),
                 "--labels", "1", "--no-cl-dice", "--out", str(d / "ev.json")]) == 0
    ev = json.loads((d / "ev.json").read_text())
    assert 0.5 < ev["dice"] <= 1.0 and ev["cl_dice"] is None
    assert main(["eval", "--pred", str(d / "fused.nii.gz"), "--gt", str(ph / "query_gt.nii.gz"),
                 "--out", str(d / "ev.csv")]) == 0
    assert (d / "ev.csv").read_text().startswith("context,dice,nsd,hd95,cl_dice")


def test_fit_fusion(work):
    ph, d = work / "ph", work
    args = ["fit-fusion", "--support-img", str(ph / "atlas.nii.gz"), "--support-mask",
            str(ph / "atlas_mask.nii.gz"), "--backend", str(d / "oracle.json"), "--config", str(d / "fast.toml"),
            "--label", "1", "--out", str(d / "fit.json"), "--report", str(d / "fit_report.json")]
    assert main(args) == 0
    p = json.loads((d / "fit.json").read_text())
    assert len(p["w"]) == 6
    assert json.loads((d / "fit_report.json").read_text())["selected"] in ("fitted", "fm_only", "atlas_only")


def test_run_is_reproducible(work, capsys):
    d = work
    for name in ("r1", "r2"):
        assert main(["run", "--config", str(d / "fast.toml"), "--out", str(d / name),
                     "--timing", str(d / f"{name}_time.csv")]) == 0
    assert listing(d / "r1") == listing(d / "r2")
    names = set(os.listdir(d / "r1"))
    assert {"resolved_config.toml", "report.json", "table_dice.csv", "m_final.nii.gz"} <= names
    assert not any("tim" in n for n in names)
    out = capsys.readouterr().out
    assert "- Registration" in out
    assert (d / "r1_time.csv").read_text().startswith("stage,min_per_image")


def test_run_seed_is_recorded(work):
    d = work
    assert main(["run", "--config", str(d / "fast.toml"), "--seed", "11", "--out", str(d / "r3")]) == 0
    assert "seed = 11" in (d / "r3" / "resolved_config.toml").read_text()


def test_crossval(work):
    d = work
    assert main(["phantom", "--kind", "two-organ", "--dims", "24", "--max-disp", "2", "--sigma", "4",
                 "--cases", "3", "--out", str(d / "cases")]) == 0
    for name in ("cv1", "cv2"):
        assert main(["crossval", "--config", str(d / "fast.toml"), "--manifest", str(d / "cases" / "manifest.json"),
                     "--folds", "3", "--out", str(d / name)]) == 0
    assert listing(d / "cv1") == listing(d / "cv2")
    rep = json.loads((d / "cv1" / "report.json").read_text())
    assert sorted(q for f in rep["folds"] for q in f["queries"]) == ["case_000", "case_001", "case_002"]


def test_user_errors_exit_2(work, capsys):
    assert main(["eval", "--pred", str(work / "missing.nii"), "--gt", str(work / "missing.nii"),
                 "--out", str(work / "x.json")]) == 2
    assert "atlasfuse eval" in capsys.readouterr().err
    (work / "bad.toml").write_text("[case]\nbogus = 1\n")
    assert main(["run", "--config", str(work / "bad.toml"), "--out", str(work / "bad")]) == 2


def test_run_case_error_exit_1(work):
    assert main(["run", "--atlas", str(work / "nope.nii"), "--atlas-mask", "x", "--query", "y",
                 "--out", str(work / "err")]) == 1


def test_entry_point_version():
    out = subprocess.run([sys.executable, "-m", "atlasfuse.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("atlasfuse ")
