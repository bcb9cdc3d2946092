"""Affine transforms, control-grid displacement fields and backward warping.

A transform maps a *target* (fixed) world point ``x`` to the moving image:
``phi(x) = A (x - c) + c + t + u(x)``, where ``c`` is the fixed-grid center
and ``u`` is the upsampled control-grid displacement in millimetres.
"""
import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _kernels
from .volume import ContractError, Geometry, LabelMask, ProbMask, Volume


@dataclass(frozen=True)
class RigidParams:
    euler_xyz: tuple = (0.0, 0.0, 0.0)
    translation_frac: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        vals = np.r_[self.euler_xyz, self.translation_frac]
        if vals.shape != (6,) or not np.all(np.isfinite(vals)):
            raise ContractError("rigid parameters must be six finite numbers")

    def as_vector(self):
        return np.r_[self.euler_xyz, self.translation_frac].astype(np.float64)

    @classmethod
    def from_vector(cls, v):
        return cls(tuple(float(x) for x in v[:3]), tuple(float(x) for x in v[3:6]))


def _rot(axis, a):
    c, s = np.cos(a), np.sin(a)
    if axis == 0:
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == 1:
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _drot(axis, a):
    c, s = np.cos(a), np.sin(a)
    if axis == 0:
        return np.array([[0, 0, 0], [0, -s, -c], [0, c, -s]])
    if axis == 1:
        return np.array([[-s, 0, c], [0, 0, 0], [-c, 0, -s]])
    return np.array([[-s, -c, 0], [c, -s, 0], [0, 0, 0]])


def euler_matrix(angles):
    """Intrinsic X-Y-Z rotation ``Rx(a) @ Ry(b) @ Rz(c)``."""
    a, b, c = angles
    return _rot(0, a) @ _rot(1, b) @ _rot(2, c)


def euler_matrix_grad(angles):
    """The three partial derivatives of :func:`euler_matrix`."""
    a, b, c = angles
    rx, ry, rz = _rot(0, a), _rot(1, b), _rot(2, c)
    return (_drot(0, a) @ ry @ rz, rx @ _drot(1, b) @ rz, rx @ ry @ _drot(2, c))


@dataclass(frozen=True)
class AffineTransform:
    """``p -> matrix @ (p - center) + center + translation_mm``."""

    matrix: np.ndarray = dc_field(default_factory=lambda: np.eye(3))
    translation_mm: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation_mm, dtype=np.float64).reshape(3)
        c = np.array(self.center, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(t)) and np.all(np.isfinite(c))):
            raise ContractError("affine transform entries must be finite")
        for name, arr in (("matrix", m), ("translation_mm", t), ("center", c)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)):
        return cls(np.eye(3), np.zeros(3), center)

    def apply(self, p):
        p = np.asarray(p, dtype=np.float64)
        return (p - self.center) @ self.matrix.T + self.center + self.translation_mm

    def to_dict(self):
        return {"matrix": self.matrix.tolist(), "translation_mm": self.translation_mm.tolist(),
                "center": self.center.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["matrix"], d["translation_mm"], d.get("center", (0.0, 0.0, 0.0)))

    def __eq__(self, other):
        return (isinstance(other, AffineTransform) and np.array_equal(self.matrix, other.matrix)
                and np.array_equal(self.translation_mm, other.translation_mm)
                and np.array_equal(self.center, other.center))

    __hash__ = None


def apply_affine(t, p):
    return t.apply(p)


def compose(outer, inner):
    """Transform equal to applying ``inner`` first, then ``outer``; keeps ``inner``'s center."""
    a, b = outer, inner
    m = a.matrix @ b.matrix
    t = a.matrix @ (b.center + b.translation_mm - a.center) + a.center + a.translation_mm - b.center
    return AffineTransform(m, t, b.center)


def inverse(t):
    inv = np.linalg.inv(t.matrix)
    return AffineTransform(inv, -inv @ t.translation_mm, t.center)


def rigid_transform(params, fixed_geom, moving_geom):
    """AffineTransform for rigid parameters.

    Translation is measured from the center-to-center offset of the two
    grids, in units of the fixed field of view.
    """
    c = fixed_geom.center
    base = moving_geom.center - c
    t = base + np.asarray(params.translation_frac) * fixed_geom.extent
    return AffineTransform(euler_matrix(params.euler_xyz), t, c)


# ---------------------------------------------------------------- fields


def control_dims(dims, fraction):
    """Control-grid size per axis for a resolution fraction in (0, 1]."""
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"control-grid fraction must be in (0, 1], got {fraction}")
    return tuple(max(2, int(np.ceil((n - 1) * fraction - 1e-9)) + 1) for n in dims)


def control_geometry(target, fraction=0.5):
    """Control grid whose corner nodes coincide with the target's corner voxels."""
    gdims = control_dims(target.dims, fraction)
    spacing = tuple(
        (n - 1) * s / (g - 1) if n > 1 else s
        for n, s, g in zip(target.dims, target.spacing, gdims)
    )
    return Geometry(gdims, spacing, target.origin)


def _interp_matrix(n_target, origin_t, spacing_t, n_ctrl, origin_c, spacing_c):
    """Dense (n_target, n_ctrl) linear-interpolation weights with edge clamping."""
    x = origin_t + spacing_t * np.arange(n_target, dtype=np.float64)
    q = np.clip((x - origin_c) / spacing_c, 0.0, n_ctrl - 1.0)
    i0 = np.minimum(np.floor(q).astype(np.intp), n_ctrl - 2)
    t = q - i0
    w = np.zeros((n_target, n_ctrl))
    rows = np.arange(n_target)
    w[rows, i0] = 1.0 - t
    w[rows, i0 + 1] += t
    return w


class DisplacementField:
    """Control-grid displacement ``u`` (mm), shape ``(3, gx, gy, gz)``."""

    __slots__ = ("geometry", "u", "_cache")

    def __init__(self, geometry, u):
        u = np.array(u, dtype=np.float64)
        if u.shape != (3,) + tuple(geometry.dims):
            raise ContractError(f"field shape {u.shape} does not match grid {geometry.dims}")
        if min(geometry.dims) < 2:
            raise ContractError("control grid needs at least two nodes per axis")
        if not np.all(np.isfinite(u)):
            raise ContractError("displacements must be finite")
        u.flags.writeable = False
        self.geometry = geometry
        self.u = u
        self._cache = {}

    @classmethod
    def zeros(cls, target, fraction=0.5):
        geom = control_geometry(target, fraction)
        return cls(geom, np.zeros((3,) + geom.dims))

    def interp_matrices(self, target):
        key = (target.dims, target.spacing, target.origin)
        if key not in self._cache:
            g = self.geometry
            self._cache[key] = tuple(
                _interp_matrix(target.dims[a], target.origin[a], target.spacing[a],
                               g.dims[a], g.origin[a], g.spacing[a])
                for a in range(3)
            )
        return self._cache[key]

    def upsample(self, target):
        """Dense ``(3, nx, ny, nz)`` displacement in mm on ``target``."""
        return upsample(self.u, self.interp_matrices(target))

    def max_norm(self):
        return float(np.sqrt((self.u ** 2).sum(axis=0)).max())

    def with_u(self, u):
        out = DisplacementField(self.geometry, u)
        out._cache = self._cache
        return out


def upsample(u, mats):
    """Separable linear interpolation of ``(3, gx, gy, gz)`` onto the matrices' target grid."""
    wx, wy, wz = mats
    a = np.matmul(wy, u @ wz.T)
    _, gx, ny, nz = a.shape
    return np.matmul(wx, a.reshape(3, gx, ny * nz)).reshape(3, wx.shape[0], ny, nz)


def upsample_adjoint(g, mats):
    """Transpose of :func:`upsample`: maps a dense gradient back to control nodes."""
    wx, wy, wz = mats
    _, nx, ny, nz = g.shape
    a = np.matmul(wx.T, g.reshape(3, nx, ny * nz)).reshape(3, wx.shape[1], ny, nz)
    return np.matmul(wy.T, a) @ wz


def smoothness_energy(field, want_grad=True):
    """Mean squared forward difference per mm, summed over axes and components.

    A field ``u_x = a * x`` has energy exactly ``a**2``.
    Returns ``(energy, grad)`` with ``grad`` shaped like ``field.u``.
    """
    u = field.u
    energy = 0.0
    grad = np.zeros_like(u) if want_grad else None
    for axis in range(3):
        h = field.geometry.spacing[axis]
        d = np.diff(u, axis=axis + 1) / h
        npairs = d[0].size
        energy += float(np.sum(d * d)) / npairs
        if want_grad:
            gd = d * (2.0 / (npairs * h))
            lo = [slice(None)] * 4
            hi = [slice(None)] * 4
            lo[axis + 1] = slice(0, -1)
            hi[axis + 1] = slice(1, None)
            grad[tuple(lo)] -= gd
            grad[tuple(hi)] += gd
    return energy, grad


def random_smooth_field(target, max_disp_vox, sigma_vox, rng):
    """Gaussian-smoothed random displacement on the full target grid.

    Scaled so that the largest per-voxel displacement norm is
    ``max_disp_vox`` voxels (measured in units of each axis' spacing).
    """
    geom = control_geometry(target, 1.0)
    noise = rng.standard_normal((3,) + target.dims)
    if max_disp_vox <= 0:
        return DisplacementField(geom, np.zeros((3,) + geom.dims))
    # periodic smoothing keeps the field statistics uniform up to the borders
    smooth = np.stack([gaussian_filter(noise[c], sigma_vox, mode="wrap") for c in range(3)])
    peak = np.sqrt((smooth ** 2).sum(axis=0)).max()
    vox = smooth * (max_disp_vox / peak) if peak > 0 else smooth
    u = vox * np.asarray(target.spacing)[:, None, None, None]
    if geom.dims != target.dims:
        # singleton axes are padded to two identical control nodes
        u = np.broadcast_to(u, (3,) + geom.dims).copy()
    return DisplacementField(geom, u)


# ---------------------------------------------------------------- warping


def kernel_matrix(t, fixed_geom, moving_geom):
    """3x4 map from fixed voxel index to moving voxel coordinate."""
    s_f = np.asarray(fixed_geom.spacing)
    s_m = np.asarray(moving_geom.spacing)
    o_f = np.asarray(fixed_geom.origin)
    o_m = np.asarray(moving_geom.origin)
    m = np.empty((3, 4))
    m[:, :3] = t.matrix * s_f[None, :] / s_m[:, None]
    # written so that identity and integer shifts stay exact in floating point
    off = (t.matrix - np.eye(3)) @ (o_f - t.center) + t.translation_mm + (o_f - o_m)
    m[:, 3] = off / s_m
    return m


def voxel_displacement(field, fixed_geom, moving_geom):
    if field is None:
        return None
    d = field.upsample(fixed_geom)
    return np.ascontiguousarray(d / np.asarray(moving_geom.spacing)[:, None, None, None])


def _moving_positions(M, disp, dims):
    i, j, k = (np.arange(n, dtype=np.float64) for n in dims)
    i, j, k = i[:, None, None], j[None, :, None], k[None, None, :]
    p = [M[a, 0] * i + M[a, 1] * j + M[a, 3] + M[a, 2] * k for a in range(3)]
    if disp is not None:
        return [p[a] + disp[a] for a in range(3)]
    return [np.broadcast_to(p[a], dims) for a in range(3)]


def _as_geometry(target):
    return target.geometry if hasattr(target, "geometry") else target


def warp_array(moving_arr, moving_geom, t, field, target):
    """Trilinear backward warp of a raw array; returns float64."""
    target = _as_geometry(target)
    M = kernel_matrix(t, target, moving_geom)
    disp = voxel_displacement(field, target, moving_geom)
    return _kernels.warp_sample(np.ascontiguousarray(moving_arr, dtype=np.float64), M, disp, target.dims)


def warp_volume(moving, t, field=None, target=None):
    target = moving.geometry if target is None else _as_geometry(target)
    t = AffineTransform.identity(target.center) if t is None else t
    out = warp_array(moving.data, moving.geometry, t, field, target)
    return Volume.on(target, out)


def warp_prob(moving, t, field=None, target=None):
    target = moving.geometry if target is None else _as_geometry(target)
    t = AffineTransform.identity(target.center) if t is None else t
    out = warp_array(moving.values, moving.geometry, t, field, target)
    return ProbMask.on(target, np.clip(out, 0.0, 1.0))


def warp_mask(moving, t, field=None, target=None, mode="nearest"):
    """Backward-warp a label mask by nearest neighbour or per-label linear vote."""
    target = moving.geometry if target is None else _as_geometry(target)
    t = AffineTransform.identity(target.center) if t is None else t
    labels = moving.labels
    if mode == "nearest":
        M = kernel_matrix(t, target, moving.geometry)
        disp = voxel_displacement(field, target, moving.geometry)
        pos = _moving_positions(M, disp, target.dims)
        idx = [np.clip(np.floor(pos[a] + 0.5), 0, moving.dims[a] - 1).astype(np.intp) for a in range(3)]
        return LabelMask.on(target, labels[idx[0], idx[1], idx[2]])
    if mode != "linear-threshold":
        raise ContractError(f"unknown mask warp mode {mode!r}")
    ids = [0] + moving.label_ids()
    best = np.full(target.dims, -1.0)
    out = np.zeros(target.dims, dtype=np.int32)
    for lab in ids:
        w = warp_array((labels == lab).astype(np.float64), moving.geometry, t, field, target)
        win = w > best  # strict: ties keep the lower label id
        out[win] = lab
        best[win] = w[win]
    return LabelMask.on(target, out)


# ---------------------------------------------------------------- serialization


def save_affine(t, path):
    with open(path, "w") as fh:
        json.dump(t.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_affine(path):
    with open(path) as fh:
        return AffineTransform.from_dict(json.load(fh))


def save_field(field, path):
    """``<stem>.json`` manifest plus ``<stem>.raw`` (3 x-fastest float64 blocks)."""
    stem = str(path)[:-5] if str(path).endswith(".json") else str(path)
    raw = stem + ".raw"
    g = field.geometry
    manifest = {"dims": list(g.dims), "spacing": list(g.spacing), "origin": list(g.origin),
                "components": 3, "dtype": "float64", "units": "mm",
                "data_file": os.path.basename(raw)}
    with open(raw, "wb") as fh:
        for c in range(3):
            fh.write(field.u[c].astype("<f8").tobytes(order="F"))
    with open(stem + ".json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return stem + ".json"


def load_field(path):
    with open(path) as fh:
        manifest = json.load(fh)
    geom = Geometry(manifest["dims"], manifest["spacing"], manifest["origin"])
    raw = os.path.join(os.path.dirname(os.path.abspath(path)), manifest["data_file"])
    data = np.fromfile(raw, dtype="<f8")
    n = geom.size
    if data.size != 3 * n:
        raise ContractError("field data length does not match its manifest")
    u = np.stack([data[c * n:(c + 1) * n].reshape(geom.dims, order="F") for c in range(3)])
    return DisplacementField(geom, u)
