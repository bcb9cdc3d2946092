import numpy as np
import pytest

from atlasfuse.backends import BackendSpec
from atlasfuse.fusion import (FitConfig, FusionParams, Triplet, binarize, fit_fusion, fit_gate, fuse,
                              fusion_objective, kalman_gain, maxpool3d, pooled_features, soft_dice_loss)
from atlasfuse.phantoms import PhantomSpec, generate_phantom
from atlasfuse.registration import RegConfig
from atlasfuse.volume import ContractError, ProbMask

import oracles


def prob(a):
    return ProbMask(np.asarray(a, dtype=np.float32))


def blobs(rng, n=12, p=0.3):
    return (rng.random((n, n, n)) < p).astype(np.float32)


@pytest.mark.parametrize("k", [3, 5, 7])
def test_maxpool_matches_brute(rng, k):
    a = rng.random((9, 8, 7)).astype(np.float32)
    assert np.array_equal(maxpool3d(prob(a), k).values, oracles.maxpool_brute(a, k))


def test_maxpool_rejects_even():
    with pytest.raises(ContractError):
        maxpool3d(prob(np.zeros((3, 3, 3))), 4)


def test_gain_saturates():
    a = prob(np.ones((4, 4, 4)))
    assert np.all(kalman_gain(a, a, FusionParams.constant(True)).values == 1.0)
    assert np.all(kalman_gain(a, a, FusionParams.constant(False)).values == 0.0)
    assert np.all(kalman_gain(a, a, FusionParams()).values == 0.5)


def test_gain_matches_formula(rng):
    a, f = prob(blobs(rng)), prob(rng.random((12, 12, 12)))
    p = FusionParams(tuple(rng.normal(0, 1, 6)), 0.3)
    want = 1.0 / (1.0 + np.exp(-(sum(w * oracles.maxpool_brute(src, k).astype(np.float64)
                                     for w, (src, k) in zip(p.w, [(a.values, 3), (a.values, 5), (a.values, 7),
                                                                  (f.values, 3), (f.values, 5), (f.values, 7)]))
                                 + p.b)))
    assert np.allclose(kalman_gain(a, f, p).values, want, atol=1e-6)


def test_fuse_endpoints_bitwise(rng):
    a, f = prob(rng.random((6, 6, 6))), prob(rng.random((6, 6, 6)))
    ones, zeros = prob(np.ones((6, 6, 6))), prob(np.zeros((6, 6, 6)))
    assert fuse(a, f, ones).values.tobytes() == a.values.tobytes()
    assert fuse(a, f, zeros).values.tobytes() == f.values.tobytes()


def test_fuse_is_convex(rng):
    a, f, k = (prob(rng.random((6, 6, 6))) for _ in range(3))
    out = fuse(a, f, k).values
    assert np.all(out >= np.minimum(a.values, f.values)) and np.all(out <= np.maximum(a.values, f.values))


def test_fuse_geometry_mismatch():
    with pytest.raises(ContractError):
        fuse(prob(np.zeros((3, 3, 3))), prob(np.zeros((3, 3, 4))), prob(np.zeros((3, 3, 3))))


def test_binarize_threshold():
    m = prob(np.array([0.2, 0.5, 0.7, 0.49]).reshape(4, 1, 1))
    assert binarize(m).labels.ravel().tolist() == [0, 1, 1, 0]


def test_soft_dice_values_and_gradient(rng):
    g = blobs(rng, 6)
    assert soft_dice_loss(g, g, 1.0)[0] == 0.0
    p = rng.random((6, 6, 6))
    _, grad = soft_dice_loss(p, g)
    fd = oracles.central_diff(lambda x: soft_dice_loss(x, g)[0], p, range(p.size), 1e-6)
    assert oracles.rel_err(grad.ravel(), fd) < 1e-6


def test_triplet_equals_full_volume_loss(rng):
    a, f, g = prob(blobs(rng)), prob(blobs(rng)), prob(blobs(rng))
    theta = rng.normal(0, 1, 7)
    t = Triplet(a, f, g)
    k = 1.0 / (1.0 + np.exp(-(np.tensordot(theta[:6], pooled_features(a, f), 1) + theta[6])))
    full = soft_dice_loss((1 - k) * f.values + k * a.values, g.values)[0]
    assert fusion_objective([t], theta)[0] == pytest.approx(full, abs=1e-12)


def test_objective_gradient(rng):
    trips = [Triplet(prob(blobs(rng)), prob(rng.random((12, 12, 12))), prob(blobs(rng))) for _ in range(2)]
    theta = rng.normal(0, 0.5, 7)
    _, g = fusion_objective(trips, theta)
    fd = oracles.central_diff(lambda x: fusion_objective(trips, x)[0], theta, range(7), 1e-6)
    assert oracles.rel_err(g, fd) < 1e-5


def test_safeguard_picks_better_source(rng):
    gt = blobs(rng)
    noise = blobs(rng)
    trips = [Triplet(prob(gt), prob(noise), prob(gt))]
    params, rep = fit_gate(trips, FitConfig(iters=0))
    assert rep["selected"] == "atlas_only" and params == FusionParams.constant(True)
    trips = [Triplet(prob(noise), prob(gt), prob(gt))]
    assert fit_gate(trips, FitConfig(iters=0))[1]["selected"] == "fm_only"


def test_fitted_beats_both_on_complementary_halves():
    gt = np.zeros((16, 16, 16), dtype=np.float32)
    gt[2:14, 2:14, 2:14] = 1
    a = gt.copy()
    a[:, :8] = 0  # atlas misses the left half
    f = gt.copy()
    f[:, 8:] = 0  # backend misses the right half
    params, rep = fit_gate([Triplet(prob(a), prob(f), prob(gt))], FitConfig(iters=100))
    c = rep["candidates"]
    assert c["fitted"] <= min(c["fm_only"], c["atlas_only"])
    assert rep["trace"][-1] < rep["trace"][0]


def test_fit_deterministic():
    ph = generate_phantom(PhantomSpec("two-organ", (24, 24, 24)))
    reg = RegConfig(pyramid_levels=[1], rigid_iters=5, affine_iters=5, deform_iters=5)
    fit = FitConfig(iters=10, n_pseudo_queries=1, aug={"max_disp_vox": 2.0, "smooth_sigma_vox": 4.0, "seed": 3})
    spec = BackendSpec("oracle", oracle={"corruption": {"erode_r": 1}})
    a = fit_fusion(ph.atlas_img, ph.atlas_mask, spec, reg, fit)
    b = fit_fusion(ph.atlas_img, ph.atlas_mask, spec, reg, fit)
    assert a[0] == b[0] and a[1] == b[1]


def test_params_round_trip(tmp_path):
    p = FusionParams((0.1, -2.0, 3.5, 0.0, 1e-9, 7.0), -0.25)
    p.save(tmp_path / "p.json")
    assert FusionParams.load(tmp_path / "p.json") == p
    with pytest.raises(ContractError):
        FusionParams((0.0,) * 5, 0.0)


def test_fit_config_validation():
    with pytest.raises(ContractError):
        FitConfig(lr=0)
    with pytest.raises(ContractError):
        FitConfig(mode="other")
