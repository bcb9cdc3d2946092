import json
import os
import sys
import textwrap

import numpy as np
import pytest

from atlasfuse.backends import (BackendError, BackendSpec, Corruption, ball, boundary_voxels, corrupt, segment,
                                write_request)
from atlasfuse.metrics import dice
from atlasfuse.phantoms import PhantomSpec, generate_phantom
from atlasfuse.prompting import EmptyPriorError, Prompt, connected_components, make_prompt
from atlasfuse.volume import ContractError, LabelMask, Volume

from conftest import mask


@pytest.fixture(scope="module")
def sphere():
    return generate_phantom(PhantomSpec("sphere", (64, 64, 64), noise_sigma=0.01))


def test_oracle_identity(sphere):
    out = segment(BackendSpec("oracle"), sphere.query_img, gt=sphere.query_gt)
    assert np.array_equal(out.values > 0.5, sphere.query_gt.labels > 0)


def test_oracle_erosion_is_subset_and_smaller(sphere):
    spec = BackendSpec("oracle", oracle={"corruption": {"erode_r": 2}})
    out = segment(spec, sphere.query_img, gt=sphere.query_gt).values > 0.5
    gt = sphere.query_gt.labels > 0
    assert not (out & ~gt).any()
    assert 0 < out.sum() < gt.sum()


def test_oracle_reads_gt_file(tmp_path, sphere):
    from atlasfuse.io import write_any

    p = write_any(sphere.query_gt, str(tmp_path / "gt.nii.gz"))
    out = segment(BackendSpec("oracle", oracle={"gt_mask_path": p}), sphere.query_img)
    assert np.array_equal(out.values > 0.5, sphere.query_gt.labels > 0)


def test_oracle_label_selection():
    a = np.zeros((8, 8, 8), dtype=np.int32)
    a[:3] = 1
    a[5:] = 2
    m = mask(a)
    out = segment(BackendSpec("oracle"), Volume(np.zeros((8, 8, 8))), gt=m, context_label=2)
    assert np.array_equal(out.values > 0.5, a == 2)


def test_oracle_geometry_mismatch():
    with pytest.raises(ContractError):
        segment(BackendSpec("oracle"), Volume(np.zeros((8, 8, 8))), gt=mask(np.zeros((8, 8, 9))))


def test_corruption_drop_rank_and_noise():
    a = np.zeros((12, 12, 12), dtype=bool)
    a[0:5, 0:5, 0:5] = True
    a[8:10, 8:10, 8:10] = True
    out = corrupt(a, Corruption(drop_rank=[0]))
    assert out.sum() == 8
    noisy = corrupt(a, Corruption(boundary_noise_prob=1.0))
    b = boundary_voxels(a)
    assert np.array_equal(noisy, a ^ b)
    assert np.array_equal(corrupt(a, Corruption(boundary_noise_prob=0.3, seed=4)),
                          corrupt(a, Corruption(boundary_noise_prob=0.3, seed=4)))


def test_ball_radius_two():
    assert ball(2).sum() == 33


def test_bad_specs():
    with pytest.raises(ContractError):
        BackendSpec("magic")
    with pytest.raises(ContractError):
        BackendSpec(oracle={"corruption": {"erode_r": -1}})
    with pytest.raises(ContractError):
        BackendSpec(oracle={"corruption": {"boundary_noise_prob": 2.0}})


@pytest.fixture(scope="module")
def flat_sphere():
    n = 64
    g = np.arange(n) - 31.5
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    truth = x * x + y * y + z * z <= 12.0 ** 2
    img = truth + np.random.default_rng(7).normal(0.0, 0.02, truth.shape)
    return Volume(img.astype(np.float32)), truth


def test_region_grow_sphere_click(flat_sphere):
    img, truth = flat_sphere
    prompt = Prompt("click", click=(32, 32, 32))
    out = segment(BackendSpec("region_grow", prompt_kind="click"), img, prompt).values > 0.5
    assert dice(out, truth) >= 0.98


@pytest.mark.parametrize("kind", ["box", "mask"])
def test_region_grow_invariants(flat_sphere, kind):
    img, truth = flat_sphere
    prompt = make_prompt(mask(truth.astype(np.int32)), kind)
    out = segment(BackendSpec("region_grow", prompt_kind=kind), img, prompt).values > 0.5
    if kind == "mask":
        assert not (truth & ~out).any()
    else:
        (a, b, c), (d, e, f) = prompt.box
        assert out[(a + d) // 2, (b + e) // 2, (c + f) // 2]
        clip = np.zeros_like(out)
        clip[a:d + 1, b:e + 1, c:f + 1] = True
        assert not (out & ~clip).any()
    assert len(connected_components(out, 26)[1]) == 1
    assert dice(out, truth) >= 0.98


def test_region_grow_needs_prompt(sphere):
    with pytest.raises(EmptyPriorError):
        segment(BackendSpec("region_grow", prompt_kind="click"), sphere.query_img)


ECHO = textwrap.dedent("""
    import json, os, sys
    req = sys.argv[-1]
    with open(os.path.join(req, "request.json")) as fh:
        r = json.load(fh)
    with open(os.path.join(req, r["volume"])) as fh:
        v = json.load(fh)
    {mutate}
    n = v["dims"][0] * v["dims"][1] * v["dims"][2]
    with open(os.path.join(req, "mask.raw"), "wb") as fh:
        fh.write(b"\\x00\\x00\\x80\\x3f" * n)
    v.update(dtype="float32", data_file="mask.raw")
    with open(os.path.join(req, r["expected_output"]), "w") as fh:
        json.dump(v, fh)
    print("done")
""")


def external(tmp_path, mutate="pass", timeout=60.0):
    script = tmp_path / "echo.py"
    script.write_text(ECHO.replace("{mutate}", mutate))
    return BackendSpec("external", prompt_kind="box",
                       external={"command": [sys.executable, str(script)], "workdir": str(tmp_path / "w"),
                                 "timeout_s": timeout})


def small_case():
    q = Volume(np.random.default_rng(0).random((6, 5, 4)).astype(np.float32), (1.0, 2.0, 1.0), (1, 2, 3))
    a = np.zeros((6, 5, 4), dtype=np.int32)
    a[1:3, 1:3, 1:3] = 1
    return q, make_prompt(LabelMask.on(q.geometry, a), "box")


def test_external_round_trip(tmp_path):
    q, p = small_case()
    out = segment(external(tmp_path), q, p)
    assert out.geometry.same_as(q.geometry) and np.all(out.values == 1.0)


def test_external_wrong_dims(tmp_path):
    q, p = small_case()
    with pytest.raises(BackendError, match="geometry"):
        segment(external(tmp_path, 'v["dims"] = [6, 5, 5]'), q, p)


def test_external_failure_carries_diagnostics(tmp_path):
    q, p = small_case()
    with pytest.raises(BackendError) as info:
        segment(external(tmp_path, 'print("boom", file=sys.stderr); sys.exit(3)'), q, p)
    assert "boom" in info.value.diagnostics and "status 3" in str(info.value)


def test_external_timeout(tmp_path):
    q, p = small_case()
    with pytest.raises(BackendError, match="timed out"):
        segment(external(tmp_path, "import time; time.sleep(5)", timeout=0.5), q, p)


def test_request_directory(tmp_path):
    q, p = small_case()
    req = write_request(str(tmp_path), q, p)
    with open(tmp_path / "request.json") as fh:
        assert json.load(fh) == req
    assert req["prompt"]["box"] == {"min": [1, 1, 1], "max": [2, 2, 2]}
    assert os.path.exists(tmp_path / "query.mvol.raw")
