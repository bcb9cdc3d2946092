"""The compiled kernels and their NumPy twins must agree."""
import numpy as np
import pytest

from atlasfuse import _kernels

C = _kernels.compiled
P = _kernels.python
needs_c = pytest.mark.skipif(C is None, reason="compiled extension not built")


def affine_m(rng):
    M = np.zeros((3, 4))
    M[:, :3] = np.eye(3) + rng.uniform(-0.1, 0.1, (3, 3))
    M[:, 3] = rng.uniform(-1, 1, 3)
    return M


def test_backend_name():
    assert _kernels.BACKEND in ("cython", "python")


@needs_c
def test_sample_points(rng):
    vol = rng.random((7, 6, 5))
    pts = np.ascontiguousarray(rng.uniform(-2, 8, (200, 3)))
    vc, gc = C.sample_points(vol, pts)
    vp, gp = P.sample_points(vol, pts)
    assert np.allclose(vc, vp, atol=1e-13) and np.allclose(gc, gp, atol=1e-12)


@needs_c
@pytest.mark.parametrize("with_disp", [False, True])
def test_warp_and_backprop(rng, with_disp):
    mov = rng.random((9, 8, 7))
    fixed = rng.random((6, 7, 5))
    M = affine_m(rng)
    disp = rng.uniform(-1, 1, (3,) + fixed.shape) if with_disp else None
    assert np.allclose(C.warp_sample(mov, M, disp, fixed.shape), P.warp_sample(mov, M, disp, fixed.shape),
                       atol=1e-13)
    r = rng.standard_normal(fixed.shape)
    dc, fc = C.warp_backprop(mov, M, disp, r, True)
    dp, fp = P.warp_backprop(mov, M, disp, r, True)
    assert np.allclose(dc, dp, rtol=1e-10, atol=1e-10) and np.allclose(fc, fp, atol=1e-12)
    lc, mc, _ = C.mse_backprop(mov, fixed, M, disp, False)
    lp, mp, _ = P.mse_backprop(mov, fixed, M, disp, False)
    assert lc == pytest.approx(lp, rel=1e-12) and np.allclose(mc, mp, rtol=1e-10, atol=1e-12)


@needs_c
def test_edt_lines_bitwise(rng):
    f = np.where(rng.random((50, 17)) < 0.2, 0.0, np.inf)
    f[3] = np.inf
    g = f.copy()
    C.edt_sq_lines(f, 0.7)
    P.edt_sq_lines(g, 0.7)
    assert np.array_equal(f, g)


@needs_c
@pytest.mark.parametrize("conn", [6, 26])
def test_components(rng, conn):
    m = np.ascontiguousarray(rng.random((12, 11, 10)) < 0.35, dtype=np.uint8)
    lc, nc = C.label_components(m, conn)
    lp, np_ = P.label_components(m, conn)
    assert nc == np_ and np.array_equal(np.asarray(lc), np.asarray(lp))


@needs_c
def test_thinning(rng):
    from scipy.ndimage import binary_dilation

    m = np.ascontiguousarray(binary_dilation(rng.random((14, 14, 14)) < 0.05, iterations=2), dtype=np.uint8)
    assert np.array_equal(np.asarray(C.thin3d(m)), np.asarray(P.thin3d(m)))
