import numpy as np
import pytest

from atlasfuse.phantoms import DeformSpec, GlobalSpec, PhantomSpec, generate_phantom
from atlasfuse.registration import (Level, RegConfig, RegistrationDiverged, _optimize, affine_objective,
                                    deformable_objective, downsample, level_factors, register_affine,
                                    register_deformable, register_pipeline, register_rigid, rigid_objective,
                                    similarity_loss)
from atlasfuse.volume import ContractError, Geometry, Volume
from atlasfuse.xform import AffineTransform, DisplacementField, control_geometry

import oracles

FAST = dict(pyramid_levels=[2, 1], rigid_iters=60, affine_iters=60, deform_iters=80)


def smooth_pair(rng, n=16):
    from scipy.ndimage import gaussian_filter

    a = gaussian_filter(rng.random((n, n, n)), 2.0)
    b = gaussian_filter(rng.random((n, n, n)), 2.0)
    return Volume(a / a.max()), Volume(b / b.max())


class TestSimilarity:
    def test_identical(self, rng):
        v = Volume(rng.random((4, 4, 4)).astype(np.float32))
        assert similarity_loss(v, v) == 0.0
        assert similarity_loss(v, v, "ncc") == pytest.approx(0.0, abs=1e-12)

    def test_constants(self):
        assert similarity_loss(Volume(np.zeros((3, 3, 3))), Volume(np.ones((3, 3, 3)))) == 1.0

    def test_matches_loop(self, rng):
        a = Volume(rng.random((6, 5, 4)).astype(np.float32))
        b = Volume(rng.random((6, 5, 4)).astype(np.float32))
        assert abs(similarity_loss(a, b) - oracles.mse_loop(a.data, b.data)) < 1e-7

    def test_geometry_mismatch(self):
        with pytest.raises(ContractError):
            similarity_loss(Volume(np.zeros((3, 3, 3))), Volume(np.zeros((3, 3, 4))))


class TestPyramid:
    def test_mean_pool_geometry(self):
        a = np.arange(5 * 4 * 4, dtype=np.float64).reshape(5, 4, 4)
        lv = downsample(Level(Geometry((5, 4, 4), (1.0, 2.0, 1.0), (0, 0, 0)), a), 2)
        assert lv.geometry.dims == (2, 2, 2)
        assert lv.geometry.spacing == (2.0, 4.0, 2.0)
        assert lv.geometry.origin == (0.5, 1.0, 0.5)
        assert lv.arr[0, 0, 0] == a[:2, :2, :2].mean()

    def test_voxel_budget(self):
        assert level_factors((128,) * 3, [4, 2, 1], 64 ** 3) == [4, 2]
        assert level_factors((64,) * 3, [4, 2, 1], 64 ** 3) == [4, 2, 1]
        assert level_factors((64,) * 3, [4, 2, 1], 0) == [4, 2, 1]

    def test_config_validation(self):
        with pytest.raises(ContractError):
            RegConfig(pyramid_levels=[1, 2])
        with pytest.raises(ContractError):
            RegConfig(deform_lr=0)
        with pytest.raises(ContractError):
            RegConfig(rigid_iters=-1)


class TestGradients:
    def test_rigid(self, rng):
        f, m = smooth_pair(rng)
        theta = rng.uniform(-0.1, 0.1, 6)
        _, g = rigid_objective(f, m, theta)
        fd = oracles.central_diff(lambda x: rigid_objective(f, m, x)[0], theta, range(6), 1e-6)
        assert oracles.rel_err(g, fd) < 1e-4

    def test_rigid_ncc(self, rng):
        f, m = smooth_pair(rng)
        theta = rng.uniform(-0.1, 0.1, 6)
        _, g = rigid_objective(f, m, theta, "ncc")
        fd = oracles.central_diff(lambda x: rigid_objective(f, m, x, "ncc")[0], theta, range(6), 1e-6)
        assert oracles.rel_err(g, fd) < 1e-4

    def test_affine(self, rng):
        f, m = smooth_pair(rng)
        theta = np.r_[(np.eye(3) + rng.uniform(-0.05, 0.05, (3, 3))).ravel(), rng.uniform(-0.05, 0.05, 3)]
        _, g = affine_objective(f, m, theta)
        fd = oracles.central_diff(lambda x: affine_objective(f, m, x)[0], theta, range(12), 1e-6)
        assert oracles.rel_err(g, fd) < 1e-4

    def test_deformable(self, rng):
        f, m = smooth_pair(rng)
        ctrl = control_geometry(f.geometry, 0.5)
        pre = AffineTransform(np.eye(3) + rng.uniform(-0.03, 0.03, (3, 3)), rng.uniform(-0.5, 0.5, 3),
                              f.geometry.center)
        u = rng.uniform(-1, 1, (3,) + ctrl.dims)
        _, g = deformable_objective(f, m, pre, u, ctrl, 0.01)
        idx = rng.choice(u.size, 100, replace=False)
        fd = oracles.central_diff(lambda x: deformable_objective(f, m, pre, x, ctrl, 0.01)[0], u, idx, 1e-6)
        assert oracles.rel_err(g.reshape(-1)[idx], fd) < 1e-4


class TestOptimizer:
    def test_best_iterate_and_trace(self):
        calls = []

        def fun(x):
            calls.append(x.copy())
            return float(np.sum((x - 3.0) ** 2)), 2.0 * (x - 3.0)

        trace = []
        x, fx = _optimize(fun, np.zeros(2), 0.1, 200, "t", 1, trace)
        assert fx == min(row[3] for row in trace)
        assert np.allclose(x, 3.0, atol=1e-2)

    def test_divergence_carries_iteration(self):
        def fun(x):
            return (np.nan if x[0] > 0.25 else float(x[0])), np.array([-1.0])

        with pytest.raises(RegistrationDiverged) as info:
            _optimize(fun, np.zeros(1), 0.1, 50, "rigid", 1, [])
        assert info.value.iteration == 3 and info.value.stage == "rigid"

    def test_patience_stops_early(self):
        trace = []
        _optimize(lambda x: (1.0, np.zeros(1)), np.zeros(1), 0.1, 1000, "t", 1, trace, patience=10, tol=1e-5)
        assert len(trace) == 11


class TestStages:
    def test_rigid_identity(self):
        ph = generate_phantom(PhantomSpec("sphere", (32, 32, 32)))
        t = register_rigid(ph.atlas_img, ph.atlas_img, RegConfig(**FAST))
        assert np.allclose(t.matrix, np.eye(3), atol=0.01)
        assert np.max(np.abs(t.translation_mm)) < 0.1

    def test_affine_stationary(self):
        ph = generate_phantom(PhantomSpec("two-organ", (32, 32, 32)))
        g = ph.atlas_img.geometry
        init = AffineTransform.identity(g.center)
        t = register_affine(ph.atlas_img, ph.atlas_img, init, RegConfig(**FAST))
        assert np.max(np.abs(t.matrix - np.eye(3))) < 1e-3
        assert np.max(np.abs(t.translation_mm / g.extent)) < 1e-3

    def test_affine_scale(self):
        ph = generate_phantom(PhantomSpec("two-organ", (48, 48, 48), misalign=GlobalSpec(scale=(1.2, 1.0, 1.0))))
        t = register_affine(ph.query_img, ph.atlas_img, None, RegConfig())
        assert t.matrix[0, 0] == pytest.approx(1.2, rel=0.02)

    def test_deformable_identity(self):
        ph = generate_phantom(PhantomSpec("two-organ", (32, 32, 32)))
        f = register_deformable(ph.atlas_img, ph.atlas_img, None, RegConfig(**FAST))
        assert f.max_norm() / min(ph.atlas_img.spacing) < 0.25

    def test_pipeline_all_disabled(self):
        ph = generate_phantom(PhantomSpec("two-organ", (24, 24, 24), deform=DeformSpec(3, 4, 1)))
        cfg = RegConfig(enable_rigid=False, enable_affine=False, enable_deform=False)
        res = register_pipeline(ph.atlas_img, ph.atlas_mask, ph.query_img, cfg)
        assert np.array_equal(res.warped_mask.labels, ph.atlas_mask.labels)
        assert res.loss_trace == []

    def test_pipeline_deterministic_and_monotone(self):
        ph = generate_phantom(PhantomSpec("two-organ", (32, 32, 32), deform=DeformSpec(4, 4, 2),
                                          misalign=GlobalSpec((2, 0, -3), (1, 0, 0), (1.0, 1.05, 1.0))))
        cfg = RegConfig(**FAST)
        a = register_pipeline(ph.atlas_img, ph.atlas_mask, ph.query_img, cfg)
        b = register_pipeline(ph.atlas_img, ph.atlas_mask, ph.query_img, cfg)
        assert a.affine == b.affine
        assert np.array_equal(a.field.u, b.field.u)
        assert a.warped_image.data.tobytes() == b.warped_image.data.tobytes()
        assert a.loss_trace == b.loss_trace
        assert a.warped_image.geometry == ph.query_img.geometry
        # best-iterate return: each deformable level ends no worse than it starts
        for factor in {row[1] for row in a.loss_trace if row[0] == "deform"}:
            losses = [row[3] for row in a.loss_trace if row[0] == "deform" and row[1] == factor]
            assert min(losses) <= losses[0]
        assert set(a.stages) == {"none", "rigid", "affine"}
