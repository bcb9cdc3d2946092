# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: trilinear warping and its adjoint, exact 1D distance
envelopes, union-find component labeling, and topology-preserving thinning.

Every function here has a drop-in twin in ``_pykernels``; the two are
checked against each other in the test suite.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, INFINITY

cnp.import_array()


cdef inline double _axis(double p, Py_ssize_t n, Py_ssize_t* i0, double* live) noexcept nogil:
    # edge-clamp: outside [0, n-1] the sample is constant along this axis
    if n == 1:
        i0[0] = 0
        live[0] = 0.0
        return 0.0
    if p <= 0.0:
        i0[0] = 0
        live[0] = 1.0 if p == 0.0 else 0.0
        return 0.0
    if p >= n - 1:
        i0[0] = n - 2
        live[0] = 1.0 if p == n - 1 else 0.0
        return 1.0
    i0[0] = <Py_ssize_t>p
    live[0] = 1.0
    return p - i0[0]


cdef inline double _sample(const double[:, :, ::1] vol, double px, double py, double pz,
                           double* gx, double* gy, double* gz) noexcept nogil:
    cdef Py_ssize_t nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2]
    cdef Py_ssize_t x0, y0, z0
    cdef double lx, ly, lz
    cdef double tx = _axis(px, nx, &x0, &lx)
    cdef double ty = _axis(py, ny, &y0, &ly)
    cdef double tz = _axis(pz, nz, &z0, &lz)
    cdef const double* v = &vol[0, 0, 0]
    cdef Py_ssize_t b00 = (x0 * ny + y0) * nz + z0
    cdef Py_ssize_t b10 = b00 + (ny * nz if nx > 1 else 0), b01 = b00 + (nz if ny > 1 else 0)
    cdef Py_ssize_t b11 = b10 + (nz if ny > 1 else 0), sz = 1 if nz > 1 else 0
    cdef double c000 = v[b00], c100 = v[b10]
    cdef double c010 = v[b01], c110 = v[b11]
    cdef double c001 = v[b00 + sz], c101 = v[b10 + sz]
    cdef double c011 = v[b01 + sz], c111 = v[b11 + sz]
    cdef double c00 = c000 * (1.0 - tx) + c100 * tx
    cdef double c10 = c010 * (1.0 - tx) + c110 * tx
    cdef double c01 = c001 * (1.0 - tx) + c101 * tx
    cdef double c11 = c011 * (1.0 - tx) + c111 * tx
    cdef double c0 = c00 * (1.0 - ty) + c10 * ty
    cdef double c1 = c01 * (1.0 - ty) + c11 * ty
    gx[0] = lx * (((c100 - c000) * (1.0 - ty) + (c110 - c010) * ty) * (1.0 - tz)
                  + ((c101 - c001) * (1.0 - ty) + (c111 - c011) * ty) * tz)
    gy[0] = ly * ((c10 - c00) * (1.0 - tz) + (c11 - c01) * tz)
    gz[0] = lz * (c1 - c0)
    return c0 * (1.0 - tz) + c1 * tz


def sample_points(const double[:, :, ::1] vol, const double[:, ::1] pts):
    """Trilinear values and voxel-unit gradients at an (N, 3) point list."""
    cdef Py_ssize_t n = pts.shape[0], q
    out = np.empty(n, dtype=np.float64)
    grad = np.empty((n, 3), dtype=np.float64)
    cdef double[::1] o = out
    cdef double[:, ::1] g = grad
    cdef double gx, gy, gz
    with nogil:
        for q in range(n):
            o[q] = _sample(vol, pts[q, 0], pts[q, 1], pts[q, 2], &gx, &gy, &gz)
            g[q, 0] = gx
            g[q, 1] = gy
            g[q, 2] = gz
    return out, grad


cdef inline const double* _disp_ptr(disp, Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz) except? NULL:
    if disp is None:
        return NULL
    if not isinstance(disp, np.ndarray) or disp.dtype != np.float64 or not disp.flags.c_contiguous:
        raise ValueError("displacement must be a C-contiguous float64 array")
    if disp.shape != (3, nx, ny, nz):
        raise ValueError("displacement shape %r does not match output %r" % (disp.shape, (nx, ny, nz)))
    return <const double*>cnp.PyArray_DATA(disp)


cdef double _pass(const double[:, :, ::1] mov, const double[:, ::1] M, const double* d,
                  Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz,
                  double* out, const double* weights, const double* fixed, double scale,
                  double* acc_out, double* fp) noexcept nogil:
    # One sweep over the output grid. ``out``: store samples only.
    # ``weights``: adjoint against them. Otherwise fused MSE against ``fixed``.
    cdef Py_ssize_t i, j, k, idx = 0, n3 = nx * ny * nz
    cdef Py_ssize_t mx = mov.shape[0], my = mov.shape[1], mz = mov.shape[2]
    cdef Py_ssize_t sx = my * mz if mx > 1 else 0
    cdef Py_ssize_t sy = mz if my > 1 else 0
    cdef Py_ssize_t sz = 1 if mz > 1 else 0
    cdef Py_ssize_t x0, y0, z0, b00, b10, b01, b11
    cdef const double* v = &mov[0, 0, 0]
    cdef double m00 = M[0, 0], m01 = M[0, 1], m02 = M[0, 2], m03 = M[0, 3]
    cdef double m10 = M[1, 0], m11 = M[1, 1], m12 = M[1, 2], m13 = M[1, 3]
    cdef double m20 = M[2, 0], m21 = M[2, 1], m22 = M[2, 2], m23 = M[2, 3]
    cdef double px, py, pz, tx, ty, tz, lx, ly, lz
    cdef double c000, c100, c010, c110, c001, c101, c011, c111
    cdef double c00, c10, c01, c11, c0, c1, val, gx, gy, gz, w = 0.0, loss = 0.0
    cdef double rx, ry, rz, rxk, ryk, rzk
    # local accumulators: a pointer into caller memory could alias ``fp``
    cdef double acc[12]
    for i in range(12):
        acc[i] = 0.0
    for i in range(nx):
        for j in range(ny):
            # row sums; the i and j moments are folded in once per row
            rx = ry = rz = rxk = ryk = rzk = 0.0
            for k in range(nz):
                if weights != NULL:
                    w = weights[idx]
                    if w == 0.0:
                        idx += 1
                        continue
                px = m00 * i + m01 * j + m03 + m02 * k
                py = m10 * i + m11 * j + m13 + m12 * k
                pz = m20 * i + m21 * j + m23 + m22 * k
                if d != NULL:
                    px = px + d[idx]
                    py = py + d[n3 + idx]
                    pz = pz + d[2 * n3 + idx]
                tx = _axis(px, mx, &x0, &lx)
                ty = _axis(py, my, &y0, &ly)
                tz = _axis(pz, mz, &z0, &lz)
                b00 = (x0 * my + y0) * mz + z0
                b10 = b00 + sx
                b01 = b00 + sy
                b11 = b10 + sy
                c000 = v[b00]
                c100 = v[b10]
                c010 = v[b01]
                c110 = v[b11]
                c001 = v[b00 + sz]
                c101 = v[b10 + sz]
                c011 = v[b01 + sz]
                c111 = v[b11 + sz]
                c00 = c000 * (1.0 - tx) + c100 * tx
                c10 = c010 * (1.0 - tx) + c110 * tx
                c01 = c001 * (1.0 - tx) + c101 * tx
                c11 = c011 * (1.0 - tx) + c111 * tx
                c0 = c00 * (1.0 - ty) + c10 * ty
                c1 = c01 * (1.0 - ty) + c11 * ty
                val = c0 * (1.0 - tz) + c1 * tz
                if out != NULL:
                    out[idx] = val
                    idx += 1
                    continue
                gx = lx * (((c100 - c000) * (1.0 - ty) + (c110 - c010) * ty) * (1.0 - tz)
                           + ((c101 - c001) * (1.0 - ty) + (c111 - c011) * ty) * tz)
                gy = ly * ((c10 - c00) * (1.0 - tz) + (c11 - c01) * tz)
                gz = lz * (c1 - c0)
                if weights == NULL:
                    w = val - fixed[idx]
                    loss += w * w
                    w = w * scale
                gx = gx * w
                gy = gy * w
                gz = gz * w
                rx += gx
                ry += gy
                rz += gz
                rxk += gx * k
                ryk += gy * k
                rzk += gz * k
                if fp != NULL:
                    fp[idx] = gx
                    fp[n3 + idx] = gy
                    fp[2 * n3 + idx] = gz
                idx += 1
            acc[0] += rx * i
            acc[1] += rx * j
            acc[2] += rxk
            acc[3] += rx
            acc[4] += ry * i
            acc[5] += ry * j
            acc[6] += ryk
            acc[7] += ry
            acc[8] += rz * i
            acc[9] += rz * j
            acc[10] += rzk
            acc[11] += rz
    if acc_out != NULL:
        for i in range(12):
            acc_out[i] = acc[i]
    return loss


def warp_sample(const double[:, :, ::1] mov, const double[:, ::1] M, disp, shape):
    """Sample ``mov`` at ``M @ [i, j, k, 1] + disp[:, i, j, k]`` for every output voxel."""
    cdef Py_ssize_t nx = shape[0], ny = shape[1], nz = shape[2]
    cdef const double* d = _disp_ptr(disp, nx, ny, nz)
    out = np.empty((nx, ny, nz), dtype=np.float64)
    cdef double* o = <double*>cnp.PyArray_DATA(out)
    with nogil:
        _pass(mov, M, d, nx, ny, nz, o, NULL, NULL, 0.0, NULL, NULL)
    return out


cdef tuple _backprop(const double[:, :, ::1] mov, const double[:, ::1] M, disp,
                     const double* weights, const double* fixed, double scale,
                     Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz, bint want_field):
    cdef const double* d = _disp_ptr(disp, nx, ny, nz)
    field = np.zeros((3, nx, ny, nz), dtype=np.float64) if want_field else None
    cdef double* fp = <double*>cnp.PyArray_DATA(field) if want_field else NULL
    dM = np.zeros((3, 4), dtype=np.float64)
    cdef double* acc = <double*>cnp.PyArray_DATA(dM)
    cdef double loss
    with nogil:
        loss = _pass(mov, M, d, nx, ny, nz, NULL, weights, fixed, scale, acc, fp)
    return loss, dM, field


def warp_backprop(const double[:, :, ::1] mov, const double[:, ::1] M, disp,
                  const double[:, :, ::1] r, bint want_field):
    """Adjoint of ``warp_sample`` against per-voxel weights ``r``.

    Returns the 3x4 gradient wrt ``M`` and, if requested, the per-voxel
    gradient wrt the displacement (shape ``(3, nx, ny, nz)``).
    """
    _, dM, field = _backprop(mov, M, disp, &r[0, 0, 0], NULL, 0.0,
                             r.shape[0], r.shape[1], r.shape[2], want_field)
    return dM, field


def mse_backprop(const double[:, :, ::1] mov, const double[:, :, ::1] fixed,
                 const double[:, ::1] M, disp, bint want_field):
    """Fused mean-squared-error loss and its gradients in a single pass."""
    cdef double n = fixed.shape[0] * fixed.shape[1] * fixed.shape[2]
    loss, dM, field = _backprop(mov, M, disp, NULL, &fixed[0, 0, 0], 2.0 / n,
                                fixed.shape[0], fixed.shape[1], fixed.shape[2], want_field)
    return loss / n, dM, field


def edt_sq_lines(double[:, ::1] f, double spacing):
    """Exact 1D squared-distance lower envelope along the last axis, in place.

    ``f`` holds per-site costs (``inf`` = no site).
    """
    cdef Py_ssize_t L = f.shape[0], n = f.shape[1], line, q, k, best
    cdef Py_ssize_t[::1] v = np.empty(n, dtype=np.intp)
    cdef double[::1] z = np.empty(n + 1, dtype=np.float64)
    cdef double[::1] src = np.empty(n, dtype=np.float64)
    cdef double s2 = spacing * spacing, x, t, cand, val
    with nogil:
        for line in range(L):
            k = -1
            for q in range(n):
                src[q] = f[line, q]
                if src[q] == INFINITY:
                    continue
                if k < 0:
                    k = 0
                    v[0] = q
                    z[0] = -INFINITY
                    z[1] = INFINITY
                    continue
                while k >= 0:
                    x = ((src[q] + s2 * q * q) - (src[v[k]] + s2 * v[k] * v[k])) / (2.0 * s2 * (q - v[k]))
                    if x <= z[k]:
                        k -= 1
                    else:
                        break
                if k < 0:
                    k = 0
                    v[0] = q
                    z[0] = -INFINITY
                    z[1] = INFINITY
                else:
                    k += 1
                    v[k] = q
                    z[k] = x
                    z[k + 1] = INFINITY
            if k < 0:
                continue
            best = k
            k = 0
            for q in range(n):
                while z[k + 1] < q:
                    k += 1
                # neighbours guard against rounding in the breakpoints
                t = spacing * (q - v[k])
                val = src[v[k]] + t * t
                if k > 0:
                    t = spacing * (q - v[k - 1])
                    cand = src[v[k - 1]] + t * t
                    if cand < val:
                        val = cand
                if k < best:
                    t = spacing * (q - v[k + 1])
                    cand = src[v[k + 1]] + t * t
                    if cand < val:
                        val = cand
                f[line, q] = val
    return np.asarray(f)


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t a) noexcept nogil:
    cdef Py_ssize_t root = a, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        nxt = parent[a]
        parent[a] = root
        a = nxt
    return root


def label_components(const unsigned char[:, :, ::1] mask, int connectivity):
    """Union-find labeling; ids 1..n follow the raster order of each component's first voxel."""
    cdef Py_ssize_t nx = mask.shape[0], ny = mask.shape[1], nz = mask.shape[2]
    cdef Py_ssize_t i, j, k, di, dj, dk, a, b, ra, rb, idx, nidx, m
    cdef Py_ssize_t total = nx * ny * nz
    cdef Py_ssize_t[::1] parent = np.arange(total, dtype=np.intp)
    # backward half of the neighbourhood
    offs = []
    for di in range(-1, 1):
        for dj in range(-1, 2):
            for dk in range(-1, 2):
                if (di, dj, dk) >= (0, 0, 0):
                    continue
                if connectivity == 6 and abs(di) + abs(dj) + abs(dk) != 1:
                    continue
                offs.append((di, dj, dk))
    cdef Py_ssize_t[:, ::1] off = np.array(offs, dtype=np.intp).reshape(-1, 3)
    cdef Py_ssize_t noff = off.shape[0]
    with nogil:
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    if not mask[i, j, k]:
                        continue
                    idx = (i * ny + j) * nz + k
                    for m in range(noff):
                        di = i + off[m, 0]
                        dj = j + off[m, 1]
                        dk = k + off[m, 2]
                        if di < 0 or dj < 0 or dk < 0 or dj >= ny or dk >= nz:
                            continue
                        if not mask[di, dj, dk]:
                            continue
                        nidx = (di * ny + dj) * nz + dk
                        ra = _find(parent, idx)
                        rb = _find(parent, nidx)
                        if ra != rb:
                            if ra < rb:
                                parent[rb] = ra
                            else:
                                parent[ra] = rb
    labels = np.zeros((nx, ny, nz), dtype=np.int32)
    cdef int[:, :, ::1] lab = labels
    cdef Py_ssize_t[::1] root_label = np.zeros(total, dtype=np.intp)
    cdef Py_ssize_t count = 0
    with nogil:
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    if not mask[i, j, k]:
                        continue
                    idx = (i * ny + j) * nz + k
                    ra = _find(parent, idx)
                    if root_label[ra] == 0:
                        count += 1
                        root_label[ra] = count
                    lab[i, j, k] = <int>root_label[ra]
    return labels, count


# 3x3x3 cube positions are indexed (dx+1)*9 + (dy+1)*3 + (dz+1); 13 is the centre.
cdef int[27][26] _ADJ26
cdef int[27] _NADJ26
cdef int[27][6] _ADJ6
cdef int[27] _NADJ6
cdef bint[27] _IN18
cdef bint[27] _FACE


cdef void _init_tables():
    cdef int p, q, dx, dy, dz, ex, ey, ez, ddx, ddy, ddz
    for p in range(27):
        dx = p // 9 - 1
        dy = (p // 3) % 3 - 1
        dz = p % 3 - 1
        _IN18[p] = p != 13 and (abs(dx) + abs(dy) + abs(dz)) <= 2
        _FACE[p] = (abs(dx) + abs(dy) + abs(dz)) == 1
        _NADJ26[p] = 0
        _NADJ6[p] = 0
        for q in range(27):
            if q == p or q == 13:
                continue
            ex = q // 9 - 1
            ey = (q // 3) % 3 - 1
            ez = q % 3 - 1
            ddx = abs(ex - dx)
            ddy = abs(ey - dy)
            ddz = abs(ez - dz)
            if ddx <= 1 and ddy <= 1 and ddz <= 1:
                _ADJ26[p][_NADJ26[p]] = q
                _NADJ26[p] += 1
                if ddx + ddy + ddz == 1:
                    _ADJ6[p][_NADJ6[p]] = q
                    _NADJ6[p] += 1


_init_tables()


cdef bint _is_simple(unsigned char* cube) noexcept nogil:
    cdef int stack[27]
    cdef unsigned char seen[27]
    cdef int p, q, m, top, comps = 0, first = -1
    for p in range(27):
        seen[p] = 0
    # foreground: 26-components among the 26 neighbours
    for p in range(27):
        if p == 13 or not cube[p] or seen[p]:
            continue
        comps += 1
        if comps > 1:
            return False
        seen[p] = 1
        top = 0
        stack[top] = p
        top += 1
        while top > 0:
            top -= 1
            q = stack[top]
            for m in range(_NADJ26[q]):
                if cube[_ADJ26[q][m]] and not seen[_ADJ26[q][m]]:
                    seen[_ADJ26[q][m]] = 1
                    stack[top] = _ADJ26[q][m]
                    top += 1
    if comps != 1:
        return False
    # background: 6-components inside N18 that touch a face neighbour
    for p in range(27):
        seen[p] = 0
    comps = 0
    for p in range(27):
        if not _FACE[p] or cube[p] or seen[p]:
            continue
        comps += 1
        if comps > 1:
            return False
        seen[p] = 1
        top = 0
        stack[top] = p
        top += 1
        while top > 0:
            top -= 1
            q = stack[top]
            for m in range(_NADJ6[q]):
                if _IN18[_ADJ6[q][m]] and not cube[_ADJ6[q][m]] and not seen[_ADJ6[q][m]]:
                    seen[_ADJ6[q][m]] = 1
                    stack[top] = _ADJ6[q][m]
                    top += 1
    return comps == 1


cdef inline void _gather(unsigned char[:, :, ::1] img, Py_ssize_t i, Py_ssize_t j, Py_ssize_t k,
                         unsigned char* cube) noexcept nogil:
    cdef int a, b, c
    for a in range(3):
        for b in range(3):
            for c in range(3):
                cube[a * 9 + b * 3 + c] = img[i + a - 1, j + b - 1, k + c - 1]


def thin3d(const unsigned char[:, :, ::1] mask):
    """Directional sequential thinning to a curve skeleton (26/6 topology)."""
    cdef Py_ssize_t nx = mask.shape[0], ny = mask.shape[1], nz = mask.shape[2]
    padded = np.zeros((nx + 2, ny + 2, nz + 2), dtype=np.uint8)
    padded[1:-1, 1:-1, 1:-1] = mask
    cdef unsigned char[:, :, ::1] img = padded
    cdef unsigned char cube[27]
    cdef Py_ssize_t i, j, k, c, ncand
    cdef int d, p, nb
    cdef bint changed = True
    cdef Py_ssize_t[:, ::1] cand = np.empty((max(1, nx * ny * nz), 3), dtype=np.intp)
    cdef int[6] faces = [4, 22, 10, 16, 12, 14]
    while changed:
        changed = False
        for d in range(6):
            ncand = 0
            with nogil:
                for i in range(1, nx + 1):
                    for j in range(1, ny + 1):
                        for k in range(1, nz + 1):
                            if not img[i, j, k]:
                                continue
                            _gather(img, i, j, k, cube)
                            if cube[faces[d]]:
                                continue
                            nb = 0
                            for p in range(27):
                                if p != 13 and cube[p]:
                                    nb += 1
                            if nb == 1:
                                continue
                            if not _is_simple(cube):
                                continue
                            cand[ncand, 0] = i
                            cand[ncand, 1] = j
                            cand[ncand, 2] = k
                            ncand += 1
                for c in range(ncand):
                    i = cand[c, 0]
                    j = cand[c, 1]
                    k = cand[c, 2]
                    _gather(img, i, j, k, cube)
                    nb = 0
                    for p in range(27):
                        if p != 13 and cube[p]:
                            nb += 1
                    if nb == 1 or not _is_simple(cube):
                        continue
                    img[i, j, k] = 0
                    changed = True
    return np.ascontiguousarray(padded[1:-1, 1:-1, 1:-1])
