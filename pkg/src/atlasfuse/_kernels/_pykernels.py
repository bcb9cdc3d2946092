"""NumPy / pure-Python twins of the compiled kernels.

Arithmetic follows the same expression order as ``_ckernels.pyx`` so the two
agree to rounding (and bitwise for values; reductions may differ in the
last ulp because NumPy sums pairwise).
"""
from collections import deque

import numpy as np


def _axis(p, n):
    """Vectorized edge-clamped interpolation indices along one axis."""
    if n == 1:
        zeros = np.zeros(p.shape, dtype=np.intp)
        return zeros, zeros, np.zeros(p.shape), np.zeros(p.shape)
    i0 = np.trunc(p)
    t = p - i0
    live = np.ones(p.shape)
    low = p <= 0.0
    high = p >= n - 1
    i0[low] = 0.0
    t[low] = 0.0
    live[low] = (p[low] == 0.0).astype(float)
    i0[high] = n - 2
    t[high] = 1.0
    live[high] = (p[high] == n - 1).astype(float)
    i0 = i0.astype(np.intp)
    return i0, i0 + 1, t, live


def _sample(vol, px, py, pz, want_grad):
    x0, x1, tx, lx = _axis(px, vol.shape[0])
    y0, y1, ty, ly = _axis(py, vol.shape[1])
    z0, z1, tz, lz = _axis(pz, vol.shape[2])
    c000 = vol[x0, y0, z0]
    c100 = vol[x1, y0, z0]
    c010 = vol[x0, y1, z0]
    c110 = vol[x1, y1, z0]
    c001 = vol[x0, y0, z1]
    c101 = vol[x1, y0, z1]
    c011 = vol[x0, y1, z1]
    c111 = vol[x1, y1, z1]
    c00 = c000 * (1.0 - tx) + c100 * tx
    c10 = c010 * (1.0 - tx) + c110 * tx
    c01 = c001 * (1.0 - tx) + c101 * tx
    c11 = c011 * (1.0 - tx) + c111 * tx
    c0 = c00 * (1.0 - ty) + c10 * ty
    c1 = c01 * (1.0 - ty) + c11 * ty
    val = c0 * (1.0 - tz) + c1 * tz
    if not want_grad:
        return val, None
    gx = lx * (((c100 - c000) * (1.0 - ty) + (c110 - c010) * ty) * (1.0 - tz)
               + ((c101 - c001) * (1.0 - ty) + (c111 - c011) * ty) * tz)
    gy = ly * ((c10 - c00) * (1.0 - tz) + (c11 - c01) * tz)
    gz = lz * (c1 - c0)
    return val, (gx, gy, gz)


def sample_points(vol, pts):
    pts = np.asarray(pts, dtype=np.float64)
    val, (gx, gy, gz) = _sample(vol, pts[:, 0], pts[:, 1], pts[:, 2], True)
    return val, np.stack([gx, gy, gz], axis=1)


def _positions(M, disp, shape):
    i, j, k = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    p = [M[a, 0] * i + M[a, 1] * j + M[a, 3] + M[a, 2] * k for a in range(3)]
    if disp is not None:
        p = [p[a] + disp[a] for a in range(3)]
    return p, (i, j, k)


def warp_sample(mov, M, disp, shape):
    (px, py, pz), _ = _positions(M, disp, tuple(shape))
    val, _ = _sample(mov, px, py, pz, False)
    return val


def warp_backprop(mov, M, disp, r, want_field):
    (px, py, pz), (i, j, k) = _positions(M, disp, r.shape)
    _, grads = _sample(mov, px, py, pz, True)
    g = [grads[a] * r for a in range(3)]
    dM = np.empty((3, 4))
    for a in range(3):
        dM[a] = [np.sum(g[a] * i), np.sum(g[a] * j), np.sum(g[a] * k), np.sum(g[a])]
    field = np.stack(g) if want_field else None
    return dM, field


def edt_sq_lines(f, spacing):
    """Brute-force lower envelope, one line at a time (same value expression as the C kernel)."""
    n = f.shape[1]
    q = np.arange(n, dtype=np.float64)
    t = spacing * (q[:, None] - q[None, :])
    sq = t * t
    for line in range(f.shape[0]):
        src = f[line].copy()
        if np.all(np.isinf(src)):
            continue
        f[line] = np.min(src[None, :] + sq, axis=1)
    return f


def label_components(mask, connectivity):
    """Breadth-first labeling in raster order of first voxel."""
    nx, ny, nz = mask.shape
    if connectivity == 6:
        offs = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
    else:
        offs = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1) if (a, b, c) != (0, 0, 0)]
    labels = np.zeros(mask.shape, dtype=np.int32)
    count = 0
    for start in zip(*np.nonzero(mask)):
        if labels[start]:
            continue
        count += 1
        labels[start] = count
        queue = deque([start])
        while queue:
            i, j, k = queue.popleft()
            for a, b, c in offs:
                p, q, r = i + a, j + b, k + c
                if 0 <= p < nx and 0 <= q < ny and 0 <= r < nz and mask[p, q, r] and not labels[p, q, r]:
                    labels[p, q, r] = count
                    queue.append((p, q, r))
    return labels, count


def _tables():
    coords = [(p // 9 - 1, (p // 3) % 3 - 1, p % 3 - 1) for p in range(27)]
    adj26, adj6 = [], []
    for p, (dx, dy, dz) in enumerate(coords):
        a26, a6 = [], []
        for q, (ex, ey, ez) in enumerate(coords):
            if q in (p, 13):
                continue
            d = (abs(ex - dx), abs(ey - dy), abs(ez - dz))
            if max(d) <= 1:
                a26.append(q)
                if sum(d) == 1:
                    a6.append(q)
        adj26.append(a26)
        adj6.append(a6)
    in18 = [p != 13 and sum(map(abs, c)) <= 2 for p, c in enumerate(coords)]
    face = [sum(map(abs, c)) == 1 for c in coords]
    return adj26, adj6, in18, face


_ADJ26, _ADJ6, _IN18, _FACE = _tables()
_FACES = (4, 22, 10, 16, 12, 14)


def _count(cube, starts, adj, allowed):
    seen = set()
    comps = 0
    for p in starts:
        if p in seen:
            continue
        comps += 1
        if comps > 1:
            return comps
        seen.add(p)
        stack = [p]
        while stack:
            q = stack.pop()
            for m in adj[q]:
                if m not in seen and allowed(m):
                    seen.add(m)
                    stack.append(m)
    return comps


def is_simple(cube):
    """Local simplicity test on a flat 27-tuple (centre excluded)."""
    fg = [p for p in range(27) if p != 13 and cube[p]]
    if _count(cube, fg, _ADJ26, lambda m: cube[m]) != 1:
        return False
    bg = [p for p in range(27) if _FACE[p] and not cube[p]]
    return _count(cube, bg, _ADJ6, lambda m: _IN18[m] and not cube[m]) == 1


def thin3d(mask):
    img = np.pad(np.asarray(mask, dtype=np.uint8), 1)
    changed = True
    while changed:
        changed = False
        for face in _FACES:
            cands = []
            for i, j, k in zip(*np.nonzero(img)):
                cube = img[i - 1:i + 2, j - 1:j + 2, k - 1:k + 2].ravel()
                if cube[face] or cube.sum() == 2 or not is_simple(cube):
                    continue
                cands.append((i, j, k))
            for i, j, k in cands:
                cube = img[i - 1:i + 2, j - 1:j + 2, k - 1:k + 2].ravel()
                if cube.sum() == 2 or not is_simple(cube):
                    continue
                img[i, j, k] = 0
                changed = True
    return np.ascontiguousarray(img[1:-1, 1:-1, 1:-1])


def mse_backprop(mov, fixed, M, disp, want_field):
    (px, py, pz), (i, j, k) = _positions(M, disp, fixed.shape)
    val, grads = _sample(mov, px, py, pz, True)
    diff = val - fixed
    n = diff.size
    r = diff * (2.0 / n)
    g = [grads[a] * r for a in range(3)]
    dM = np.empty((3, 4))
    for a in range(3):
        dM[a] = [np.sum(g[a] * i), np.sum(g[a] * j), np.sum(g[a] * k), np.sum(g[a])]
    field = np.stack(g) if want_field else None
    return np.sum(diff * diff) / n, dM, field
