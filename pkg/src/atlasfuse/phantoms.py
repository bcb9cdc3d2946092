"""Synthetic atlas/query pairs with known ground-truth warps."""
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import ContractError, Geometry, LabelMask, Volume
from .xform import AffineTransform, DisplacementField, euler_matrix, random_smooth_field, warp_mask, warp_volume

KINDS = ("sphere", "two-organ", "tube-tree")


@dataclass
class DeformSpec:
    max_disp_vox: float = 0.0
    smooth_sigma_vox: float = 8.0
    seed: int = 0


@dataclass
class GlobalSpec:
    """Known global misalignment applied before the smooth warp."""

    rot_deg: tuple = (0.0, 0.0, 0.0)
    shift_vox: tuple = (0.0, 0.0, 0.0)
    scale: tuple = (1.0, 1.0, 1.0)


@dataclass
class PhantomSpec:
    kind: str = "sphere"
    dims: tuple = (64, 64, 64)
    noise_sigma: float = 0.0
    deform: DeformSpec = dc_field(default_factory=DeformSpec)
    misalign: GlobalSpec = dc_field(default_factory=GlobalSpec)
    spacing: tuple = (1.0, 1.0, 1.0)
    radius: float = 0.0  # sphere radius in voxels; 0 picks dims/6.4
    blur_sigma: float = 1.0  # intensity smoothing in voxels (masks stay sharp)
    seed: int = 0  # noise and shape jitter

    def __post_init__(self):
        if isinstance(self.deform, dict):
            self.deform = DeformSpec(**self.deform)
        if isinstance(self.misalign, dict):
            self.misalign = GlobalSpec(**self.misalign)
        if self.kind not in KINDS:
            raise ContractError(f"unknown phantom kind {self.kind!r}")
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise ContractError("phantom dims must be >= 16 per axis")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class Phantom:
    atlas_img: Volume
    atlas_mask: LabelMask
    query_img: Volume
    query_gt: LabelMask
    true_affine: AffineTransform
    true_field: DisplacementField
    center: tuple = None  # voxel coordinates of the shape center


def _grid(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def sphere_mask(dims, center, radius):
    x, y, z = _grid(dims)
    c = np.asarray(center, dtype=np.float64)
    return (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2 <= radius ** 2


def _ellipsoid(x, y, z, c, r):
    return ((x - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((z - c[2]) / r[2]) ** 2 <= 1.0


def _segment_dist(x, y, z, a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    d = b - a
    t = ((x - a[0]) * d[0] + (y - a[1]) * d[1] + (z - a[2]) * d[2]) / float(d @ d)
    t = np.clip(t, 0.0, 1.0)
    return np.sqrt((x - a[0] - t * d[0]) ** 2 + (y - a[1] - t * d[1]) ** 2 + (z - a[2] - t * d[2]) ** 2)


def _shapes(spec, rng):
    """Label array and clean intensity array for the atlas."""
    dims = spec.dims
    n = np.asarray(dims, dtype=np.float64)
    x, y, z = _grid(dims)
    c = (n - 1) / 2.0 + rng.uniform(-1.0, 1.0, 3)
    labels = np.zeros(dims, dtype=np.int32)
    img = np.zeros(dims)
    if spec.kind == "sphere":
        r = spec.radius or min(dims) / 6.4
        inside = sphere_mask(dims, c, r)
        labels[inside] = 1
        # interior ramp and an anisotropic body break rotational symmetry
        ramp = 0.6 + 0.4 * (x - c[0]) / r
        img = np.where(inside, np.clip(ramp, 0.2, 1.0), 0.0)
        img += 0.15 * _ellipsoid(x, y, z, c, np.array([0.44, 0.34, 0.40]) * n)
    elif spec.kind == "two-organ":
        body = _ellipsoid(x, y, z, c, 0.45 * n)
        img += 0.2 * body
        c1 = c + np.array([-0.18, -0.05, 0.02]) * n
        c2 = c + np.array([0.17, 0.08, -0.03]) * n
        e1 = _ellipsoid(x, y, z, c1, np.array([0.16, 0.13, 0.18]) * n)
        e2 = _ellipsoid(x, y, z, c2, np.array([0.11, 0.14, 0.12]) * n) & ~e1
        labels[e1] = 1
        labels[e2] = 2
        img[e1] = 0.8
        img[e2] = 0.5
    else:
        img += 0.1 * _ellipsoid(x, y, z, c, 0.45 * n)
        r = max(1.6, min(dims) / 24.0)
        top = c + np.array([0.0, 0.0, -0.35]) * n
        mid = c + np.array([0.0, 0.0, 0.05]) * n
        ends = [c + np.array([0.25, 0.1, 0.35]) * n, c + np.array([-0.22, -0.15, 0.33]) * n,
                c + np.array([0.05, 0.28, 0.3]) * n]
        dist = _segment_dist(x, y, z, top, mid)
        for e in ends:
            dist = np.minimum(dist, _segment_dist(x, y, z, mid, e))
        tube = dist <= r
        labels[tube] = 1
        img[tube] = 1.0
    if spec.blur_sigma > 0:
        img = gaussian_filter(img, spec.blur_sigma, mode="nearest")
    return labels, img, tuple(float(v) for v in c)


def global_transform(g, geom):
    """Known global misalignment as an AffineTransform about the grid center."""
    a = np.deg2rad(np.asarray(g.rot_deg, dtype=np.float64))
    m = euler_matrix(a) @ np.diag(np.asarray(g.scale, dtype=np.float64))
    t = np.asarray(g.shift_vox, dtype=np.float64) * np.asarray(geom.spacing)
    return AffineTransform(m, t, geom.center)


def generate_phantom(spec):
    """Atlas image/mask plus a query made by warping the atlas with a known transform.

    The query is ``atlas(T(x) + u(x))``; with no misalignment and zero
    displacement it is the atlas itself, bit for bit.
    """
    rng = np.random.default_rng(spec.seed)
    labels, img, center = _shapes(spec, rng)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    geom = Geometry(spec.dims, spec.spacing, (0.0, 0.0, 0.0))
    atlas_img = Volume.on(geom, img)
    atlas_mask = LabelMask.on(geom, labels)
    d = spec.deform
    field = random_smooth_field(geom, d.max_disp_vox, d.smooth_sigma_vox, np.random.default_rng(d.seed))
    t = global_transform(spec.misalign, geom)
    identity = t == AffineTransform.identity(geom.center) and d.max_disp_vox <= 0
    if identity:
        query_img, query_gt = atlas_img, atlas_mask
    else:
        query_img = warp_volume(atlas_img, t, field, geom)
        query_gt = warp_mask(atlas_mask, t, field, geom, "nearest")
    return Phantom(atlas_img, atlas_mask, query_img, query_gt, t, field, center)


def phantom_suite(dims=(48, 48, 48), n=10, seed=0):
    """Ten atlas/query pairs cycling the three kinds, each with misalignment and a smooth warp."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n):
        kind = KINDS[i % 3]
        misalign = GlobalSpec(
            rot_deg=tuple(float(v) for v in rng.uniform(-8, 8, 3)),
            shift_vox=tuple(float(v) for v in rng.uniform(-3, 3, 3)),
            scale=tuple(float(v) for v in rng.uniform(0.9, 1.1, 3)),
        )
        specs.append(PhantomSpec(kind=kind, dims=tuple(dims), noise_sigma=0.02,
                                 deform=DeformSpec(max_disp_vox=min(dims) / 8.0, smooth_sigma_vox=min(dims) / 8.0,
                                                   seed=int(rng.integers(1 << 30))),
                                 misalign=misalign, seed=int(rng.integers(1 << 30))))
    return specs
