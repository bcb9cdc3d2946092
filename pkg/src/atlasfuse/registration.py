"""Test-time registration of an atlas onto a query: rigid, affine, deformable.

All stages minimize an image dissimilarity with Adam over a mean-pooled
pyramid and return the best iterate seen. Gradients are analytic: the
compiled kernel returns the loss gradient with respect to the 3x4
voxel-to-voxel matrix and, for the deformable stage, with respect to the
per-voxel displacement; the chain rule back to the parameters is here.
"""
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from . import _kernels
from .optim import Adam
from .volume import ContractError, Geometry, Volume
from .xform import (AffineTransform, DisplacementField, RigidParams, compose, control_geometry,
                    euler_matrix, euler_matrix_grad, kernel_matrix, smoothness_energy, upsample,
                    upsample_adjoint, warp_mask, warp_volume)


class RegistrationDiverged(RuntimeError):
    def __init__(self, stage, iteration, value):
        super().__init__(f"{stage} registration diverged at iteration {iteration} (loss {value})")
        self.stage = stage
        self.iteration = iteration


@dataclass
class RegConfig:
    pyramid_levels: list = dc_field(default_factory=lambda: [4, 2, 1])
    rigid_iters: int = 300
    affine_iters: int = 300
    deform_iters: int = 1000
    deform_lr: float = 1e-4
    pre_reg_lr: float = 1e-2
    smooth_lambda: float = 0.01
    loss: str = "mse"
    enable_rigid: bool = True
    enable_affine: bool = True
    enable_deform: bool = True
    grid_fraction: float = 0.5
    # finest pyramid level is coarsened until it holds at most this many voxels
    voxel_budget: int = 64 ** 3
    # stop a level after this many iterations without relative gain > tol (0 = never)
    patience: int = 100
    tol: float = 1e-5

    def __post_init__(self):
        self.pyramid_levels = [int(f) for f in self.pyramid_levels]
        if not self.pyramid_levels or min(self.pyramid_levels) < 1:
            raise ContractError("pyramid factors must be positive integers")
        if any(a <= b for a, b in zip(self.pyramid_levels, self.pyramid_levels[1:])):
            raise ContractError("pyramid factors must be strictly descending")
        if min(self.rigid_iters, self.affine_iters, self.deform_iters) < 0:
            raise ContractError("iteration counts must be >= 0")
        if self.deform_lr <= 0 or self.pre_reg_lr <= 0:
            raise ContractError("learning rates must be positive")
        if self.loss not in ("mse", "ncc"):
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.smooth_lambda < 0:
            raise ContractError("smooth_lambda must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class RegistrationResult:
    affine: AffineTransform
    field: DisplacementField
    warped_image: Volume
    warped_mask: object
    loss_trace: list  # (stage, pyramid factor, iteration, loss)
    # global transform after each pre-registration stage: "none", "rigid", "affine"
    stages: dict = dc_field(default_factory=dict)

    def stage_trace(self, stage):
        return np.array([row[3] for row in self.loss_trace if row[0] == stage])


# ---------------------------------------------------------------- pyramid


class Level:
    """A float64 image on a geometry; the working form of one pyramid level."""

    __slots__ = ("geometry", "arr")

    def __init__(self, geometry, arr):
        self.geometry = geometry
        self.arr = np.ascontiguousarray(arr, dtype=np.float64)

    @classmethod
    def of(cls, v):
        return cls(v.geometry, v.data)


def downsample(level, factor):
    """Mean-pool by ``factor`` per axis (trailing remainder cropped).

    Axes shorter than ``factor`` are pooled by their own length instead.
    """
    g = level.geometry
    fs = [max(1, min(factor, n)) for n in g.dims]
    if fs == [1, 1, 1]:
        return level
    out_dims = [n // f for n, f in zip(g.dims, fs)]
    a = level.arr[:out_dims[0] * fs[0], :out_dims[1] * fs[1], :out_dims[2] * fs[2]]
    a = a.reshape(out_dims[0], fs[0], out_dims[1], fs[1], out_dims[2], fs[2]).mean(axis=(1, 3, 5))
    spacing = [s * f for s, f in zip(g.spacing, fs)]
    origin = [o + s * (f - 1) / 2.0 for o, s, f in zip(g.origin, g.spacing, fs)]
    return Level(Geometry(out_dims, spacing, origin), a)


def level_factors(dims, factors, budget):
    """Pyramid factors after enforcing the voxel budget, deduplicated, coarse first."""
    out = []
    for f in factors:
        while budget and np.prod([max(1, n // min(f, n)) for n in dims]) > budget:
            f += 1
        if f not in out:
            out.append(f)
    return sorted(out, reverse=True)


# ---------------------------------------------------------------- similarity


def similarity_loss(fixed, warped, kind="mse"):
    """MSE, or ``1 - NCC`` (global normalized cross-correlation)."""
    if not fixed.geometry.same_as(warped.geometry):
        raise ContractError("similarity needs matching geometries")
    f = fixed.data.astype(np.float64)
    w = warped.data.astype(np.float64)
    if kind == "mse":
        return float(np.mean((w - f) ** 2))
    if kind == "ncc":
        return 1.0 - _ncc(w, f)[0]
    raise ContractError(f"unknown loss {kind!r}")


def _ncc(w, f):
    a = w - w.mean()
    b = f - f.mean()
    sa, sb = float(np.sum(a * a)), float(np.sum(b * b))
    if sa <= 0 or sb <= 0:
        return 0.0, a, b, sa, sb
    return float(np.sum(a * b)) / np.sqrt(sa * sb), a, b, sa, sb


class _Pair:
    """Fixed/moving arrays at one level plus the loss-and-gradient evaluator."""

    def __init__(self, fixed, moving, kind):
        self.fixed, self.moving, self.kind = fixed, moving, kind

    def image_loss(self, M, disp, want_field):
        f, m = self.fixed, self.moving
        if self.kind == "mse":
            return _kernels.mse_backprop(m.arr, f.arr, M, disp, want_field)
        w = _kernels.warp_sample(m.arr, M, disp, f.geometry.dims)
        ncc, a, b, sa, sb = _ncc(w, f.arr)
        if sa <= 0 or sb <= 0:
            r = np.zeros_like(w)
        else:
            r = -(b / np.sqrt(sa * sb) - ncc * a / sa)
        dM, fld = _kernels.warp_backprop(m.arr, M, disp, np.ascontiguousarray(r), want_field)
        return 1.0 - ncc, dM, fld


def _matrix_grads(dM, t, fixed_geom, moving_geom):
    """Map a 3x4 kernel-matrix gradient to gradients wrt (A, t_mm)."""
    s_f = np.asarray(fixed_geom.spacing)
    s_m = np.asarray(moving_geom.spacing)
    o_f = np.asarray(fixed_geom.origin)
    ga = (dM[:, :3] * s_f[None, :] + np.outer(dM[:, 3], o_f - t.center)) / s_m[:, None]
    gt = dM[:, 3] / s_m
    return ga, gt


class _Frame:
    """Constants shared by the global stages: center, base offset, FOV extent."""

    def __init__(self, fixed_geom, moving_geom):
        self.center = fixed_geom.center
        self.base = moving_geom.center - fixed_geom.center
        self.extent = fixed_geom.extent

    def rigid(self, theta):
        return AffineTransform(euler_matrix(theta[:3]), self.base + theta[3:] * self.extent, self.center)

    def affine(self, theta):
        return AffineTransform(theta[:9].reshape(3, 3), self.base + theta[9:] * self.extent, self.center)

    def affine_params(self, t):
        t = recenter(t, self.center)
        return np.r_[t.matrix.ravel(), (t.translation_mm - self.base) / self.extent]


def recenter(t, c):
    """Same mapping expressed about center ``c``."""
    c = np.asarray(c, dtype=np.float64)
    if np.array_equal(c, t.center):
        return t
    return AffineTransform(t.matrix, t.matrix @ (c - t.center) + t.center + t.translation_mm - c, c)


def _rigid_fun(pair, frame):
    def fun(theta):
        t = frame.rigid(theta)
        M = kernel_matrix(t, pair.fixed.geometry, pair.moving.geometry)
        loss, dM, _ = pair.image_loss(M, None, False)
        ga, gt = _matrix_grads(dM, t, pair.fixed.geometry, pair.moving.geometry)
        dr = euler_matrix_grad(theta[:3])
        g = np.r_[[np.sum(ga * d) for d in dr], gt * frame.extent]
        return loss, g
    return fun


def _affine_fun(pair, frame):
    def fun(theta):
        t = frame.affine(theta)
        M = kernel_matrix(t, pair.fixed.geometry, pair.moving.geometry)
        loss, dM, _ = pair.image_loss(M, None, False)
        ga, gt = _matrix_grads(dM, t, pair.fixed.geometry, pair.moving.geometry)
        return loss, np.r_[ga.ravel(), gt * frame.extent]
    return fun


class _DeformFun:
    """Loss in normalized field units ``v = u_mm / fov_extent`` on one control grid."""

    def __init__(self, pair, pre, ctrl_geom, lam, extent):
        self.pair, self.lam = pair, lam
        self.ctrl = DisplacementField(ctrl_geom, np.zeros((3,) + ctrl_geom.dims))
        self.mats = self.ctrl.interp_matrices(pair.fixed.geometry)
        self.M = kernel_matrix(pre, pair.fixed.geometry, pair.moving.geometry)
        self.unit = np.asarray(extent, dtype=np.float64)[:, None, None, None]
        self.s_m = np.asarray(pair.moving.geometry.spacing)[:, None, None, None]
        self.shape = (3,) + ctrl_geom.dims

    def field(self, v):
        return self.ctrl.with_u(v.reshape(self.shape) * self.unit)

    def __call__(self, v):
        u = v.reshape(self.shape) * self.unit
        disp = np.ascontiguousarray(upsample(u, self.mats) / self.s_m)
        loss, _, g = self.pair.image_loss(self.M, disp, True)
        gu = upsample_adjoint(g / self.s_m, self.mats)
        if self.lam > 0:
            e, ge = smoothness_energy(self.ctrl.with_u(u))
            loss += self.lam * e
            gu += self.lam * ge
        return loss, (gu * self.unit).ravel()


def _optimize(fun, x0, lr, iters, stage, factor, trace, patience=0, tol=0.0):
    """Adam with best-iterate return; every evaluated loss goes to ``trace``."""
    opt = Adam(lr)
    x = np.array(x0, dtype=np.float64)
    best_x, best_f = x.copy(), np.inf
    ref, since = np.inf, 0
    for it in range(iters + 1):
        f, g = fun(x)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise RegistrationDiverged(stage, it, f)
        trace.append((stage, factor, it, float(f)))
        if f < best_f:
            best_x, best_f = x.copy(), f
        if it == 0 or f < ref - tol * abs(ref):
            ref, since = f, 0
        else:
            since += 1
        if it == iters or (patience and since >= patience):
            break
        x = opt.step(x, g)
    return best_x, best_f


def _pyramid(fixed, moving, cfg):
    fl, ml = Level.of(fixed), Level.of(moving)
    out = []
    for f in level_factors(fixed.dims, cfg.pyramid_levels, cfg.voxel_budget):
        out.append((f, _Pair(downsample(fl, f), downsample(ml, f), cfg.loss)))
    return out


def _level_lr(base_lr, factor, factors):
    # halve the step at each finer level; the coarsest level uses the base rate
    return base_lr * factor / factors[0]


def register_rigid(fixed, moving, cfg=None, trace=None, init=None):
    """Six-parameter rigid alignment; returns an AffineTransform about the fixed center."""
    cfg = cfg or RegConfig()
    trace = [] if trace is None else trace
    frame = _Frame(fixed.geometry, moving.geometry)
    theta = np.zeros(6) if init is None else np.asarray(init.as_vector(), dtype=np.float64)
    levels = _pyramid(fixed, moving, cfg)
    factors = [f for f, _ in levels]
    for f, pair in levels:
        theta, _ = _optimize(_rigid_fun(pair, frame), theta, _level_lr(cfg.pre_reg_lr, f, factors),
                             cfg.rigid_iters, "rigid", f, trace, cfg.patience, cfg.tol)
    return frame.rigid(theta)


def rigid_params_of(t, fixed_geom, moving_geom):
    """Recover RigidParams from a pure rotation+translation transform."""
    frame = _Frame(fixed_geom, moving_geom)
    t = recenter(t, frame.center)
    r = t.matrix
    b = np.arcsin(np.clip(r[0, 2], -1.0, 1.0))
    a = np.arctan2(-r[1, 2], r[2, 2])
    c = np.arctan2(-r[0, 1], r[0, 0])
    return RigidParams((a, b, c), tuple((t.translation_mm - frame.base) / frame.extent))


def register_affine(fixed, moving, init=None, cfg=None, trace=None):
    """Twelve-parameter affine alignment starting from ``init``."""
    cfg = cfg or RegConfig()
    trace = [] if trace is None else trace
    frame = _Frame(fixed.geometry, moving.geometry)
    if init is None:
        init = AffineTransform(np.eye(3), frame.base, frame.center)
    theta = frame.affine_params(init)
    levels = _pyramid(fixed, moving, cfg)
    factors = [f for f, _ in levels]
    for f, pair in levels:
        theta, _ = _optimize(_affine_fun(pair, frame), theta, _level_lr(cfg.pre_reg_lr, f, factors),
                             cfg.affine_iters, "affine", f, trace, cfg.patience, cfg.tol)
    return frame.affine(theta)


def register_deformable(fixed, moving, pre=None, cfg=None, trace=None):
    """Dense displacement on a control grid, coarse to fine, composed after ``pre``.

    The control grid at each level is ``grid_fraction`` of that level's
    resolution; the field is carried across levels by interpolation.
    """
    cfg = cfg or RegConfig()
    trace = [] if trace is None else trace
    frame = _Frame(fixed.geometry, moving.geometry)
    if pre is None:
        pre = AffineTransform(np.eye(3), frame.base, frame.center)
    field = None
    for f, pair in _pyramid(fixed, moving, cfg):
        ctrl = control_geometry(pair.fixed.geometry, cfg.grid_fraction)
        fun = _DeformFun(pair, pre, ctrl, cfg.smooth_lambda, frame.extent)
        u0 = np.zeros((3,) + ctrl.dims) if field is None else field.upsample(ctrl)
        v0 = (u0 / fun.unit).ravel()
        v, _ = _optimize(fun, v0, cfg.deform_lr, cfg.deform_iters, "deform", f, trace,
                         cfg.patience, cfg.tol)
        field = fun.field(v)
    if field is None:
        field = DisplacementField.zeros(fixed.geometry, cfg.grid_fraction)
    return field


def register_pipeline(atlas_img, atlas_mask, query_img, cfg=None):
    """Enabled stages in order; warps the atlas image and mask into query space.

    Inputs are used as given; callers normalize intensities beforehand.
    """
    cfg = cfg or RegConfig()
    trace = []
    frame = _Frame(query_img.geometry, atlas_img.geometry)
    stages = {"none": AffineTransform.identity(frame.center)}
    if cfg.enable_rigid:
        t = register_rigid(query_img, atlas_img, cfg, trace)
    elif cfg.enable_affine or cfg.enable_deform:
        t = AffineTransform(np.eye(3), frame.base, frame.center)
    else:
        t = stages["none"]
    stages["rigid"] = t
    if cfg.enable_affine:
        t = register_affine(query_img, atlas_img, t, cfg, trace)
    stages["affine"] = t
    if cfg.enable_deform:
        field = register_deformable(query_img, atlas_img, t, cfg, trace)
    else:
        field = DisplacementField.zeros(query_img.geometry, cfg.grid_fraction)
    warped = warp_volume(atlas_img, t, field, query_img.geometry)
    wmask = warp_mask(atlas_mask, t, field, query_img.geometry, "nearest") if atlas_mask is not None else None
    return RegistrationResult(t, field, warped, wmask, trace, stages)


# ------------------------------------------------- single-level objectives (for checks)


def _single(fixed, moving, kind):
    return _Pair(Level.of(fixed) if isinstance(fixed, Volume) else fixed,
                 Level.of(moving) if isinstance(moving, Volume) else moving, kind)


def rigid_objective(fixed, moving, theta, kind="mse"):
    """Loss and gradient wrt (3 Euler angles, 3 FOV-normalized translations)."""
    pair = _single(fixed, moving, kind)
    return _rigid_fun(pair, _Frame(pair.fixed.geometry, pair.moving.geometry))(np.asarray(theta, float))


def affine_objective(fixed, moving, theta, kind="mse"):
    """Loss and gradient wrt (row-major 3x3 matrix, 3 FOV-normalized translations)."""
    pair = _single(fixed, moving, kind)
    return _affine_fun(pair, _Frame(pair.fixed.geometry, pair.moving.geometry))(np.asarray(theta, float))


def deformable_objective(fixed, moving, pre, u_mm, ctrl_geom, lam=0.01, kind="mse"):
    """Loss and gradient wrt control-grid displacements in mm."""
    pair = _single(fixed, moving, kind)
    fun = _DeformFun(pair, pre, ctrl_geom, lam, np.ones(3))
    loss, g = fun(np.asarray(u_mm, dtype=np.float64).ravel())
    return loss, g.reshape(fun.shape)
