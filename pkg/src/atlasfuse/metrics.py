"""Dice, HD95, NSD and clDice on voxel masks, with the geometric primitives they need."""
import math
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from . import _kernels
from .volume import ContractError, LabelMask


def _fg(m):
    if isinstance(m, LabelMask):
        return m.labels > 0
    return np.asarray(m) > 0


def _spacing(m, spacing):
    if spacing is not None:
        return tuple(float(s) for s in spacing)
    return m.spacing if isinstance(m, LabelMask) else (1.0, 1.0, 1.0)


def _same(a, b):
    fa, fb = _fg(a), _fg(b)
    if fa.shape != fb.shape:
        raise ContractError(f"mask shapes differ: {fa.shape} vs {fb.shape}")
    if isinstance(a, LabelMask) and isinstance(b, LabelMask) and not a.geometry.same_as(b.geometry):
        raise ContractError("mask geometries differ")
    return fa, fb


def dice(a, b):
    """``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    fa, fb = _same(a, b)
    total = int(fa.sum()) + int(fb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(fa, fb).sum()) / total


def surface_voxels(m):
    """Foreground voxels with a background 6-neighbour (outside the grid is background)."""
    fg = _fg(m)
    p = np.pad(fg, 1)
    inner = p[1:-1, 1:-1, 1:-1]
    interior = inner.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(p, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return fg & ~interior


def edt(m, spacing=None):
    """Exact Euclidean distance (mm) from each voxel to the nearest foreground voxel.

    Separable lower-envelope passes along x, then y, then z. An empty mask
    yields ``inf`` everywhere.
    """
    fg = _fg(m)
    sp = _spacing(m, spacing)
    f = np.where(fg, 0.0, np.inf)
    if not fg.any():
        return f
    for axis in range(3):
        moved = np.ascontiguousarray(np.moveaxis(f, axis, -1))
        shape = moved.shape
        lines = moved.reshape(-1, shape[-1])
        _kernels.edt_sq_lines(lines, sp[axis])
        f = np.moveaxis(lines.reshape(shape), -1, axis)
    return np.sqrt(np.ascontiguousarray(f))


def surface_distances(a, b, spacing=None):
    """Distances from each surface voxel of ``a`` to the surface of ``b`` and back."""
    sp = _spacing(a, spacing)
    sa, sb = surface_voxels(a), surface_voxels(b)
    return edt(sb, sp)[sa], edt(sa, sp)[sb]


def hd95(a, b, spacing=None, convention="pooled"):
    """95th percentile surface distance in mm; ``nan`` if either mask is empty.

    ``pooled`` takes the percentile of both directed distance sets together;
    ``max`` takes the larger of the two directed percentiles.
    """
    fa, fb = _same(a, b)
    if not fa.any() or not fb.any():
        return math.nan
    dab, dba = surface_distances(fa, fb, _spacing(a, spacing))
    if convention == "pooled":
        return float(np.percentile(np.concatenate([dab, dba]), 95))
    if convention == "max":
        return float(max(np.percentile(dab, 95), np.percentile(dba, 95)))
    raise ContractError(f"unknown HD95 convention {convention!r}")


def nsd(a, b, spacing=None, tol_mm=1.0):
    """Fraction of both surfaces lying within ``tol_mm`` of the other surface."""
    fa, fb = _same(a, b)
    ea, eb = fa.any(), fb.any()
    if not ea and not eb:
        return 1.0
    if not ea or not eb:
        return 0.0
    dab, dba = surface_distances(fa, fb, _spacing(a, spacing))
    return (int(np.sum(dab <= tol_mm)) + int(np.sum(dba <= tol_mm))) / (dab.size + dba.size)


def skeletonize3d(m):
    """Topology-preserving thinning to a one-voxel-wide skeleton."""
    fg = np.ascontiguousarray(_fg(m), dtype=np.uint8)
    out = _kernels.thin3d(fg).astype(np.int32)
    if isinstance(m, LabelMask):
        return LabelMask.on(m.geometry, out)
    return out


def cl_dice(pred, gt):
    """Centerline Dice; ``nan`` when either skeleton is empty."""
    fp, fg = _same(pred, gt)
    sp = _fg(skeletonize3d(fp))
    sg = _fg(skeletonize3d(fg))
    if not sp.any() or not sg.any():
        return math.nan
    tprec = int(np.sum(sp & fg)) / int(sp.sum())
    tsens = int(np.sum(sg & fp)) / int(sg.sum())
    if tprec + tsens == 0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


@dataclass
class MetricsReport:
    dice: float
    nsd: float
    hd95: float
    cl_dice: float
    tolerance_mm: float = 1.0
    hd95_convention: str = "pooled"
    per_context: dict = dc_field(default_factory=dict)
    flags: list = dc_field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _one(pred, gt, spacing, tol_mm, convention, with_cl):
    d = {"dice": dice(pred, gt), "nsd": nsd(pred, gt, spacing, tol_mm),
         "hd95": hd95(pred, gt, spacing, convention),
         "cl_dice": cl_dice(pred, gt) if with_cl else math.nan}
    return d


def evaluate(pred, gt, contexts=None, tol_mm=1.0, convention="pooled", with_cl_dice=True):
    """Metrics per context label and their mean.

    ``contexts`` defaults to every label present in ``gt``. Undefined values
    (empty masks or skeletons) are ``nan`` and noted in ``flags``.
    """
    if not pred.geometry.same_as(gt.geometry):
        raise ContractError("prediction and ground truth geometries differ")
    contexts = gt.label_ids() if contexts is None else list(contexts)
    per, flags = {}, []
    for lab in contexts:
        m = _one(pred.labels == lab, gt.labels == lab, gt.spacing, tol_mm, convention, with_cl_dice)
        for k, v in m.items():
            if isinstance(v, float) and math.isnan(v) and (k != "cl_dice" or with_cl_dice):
                flags.append(f"{k} undefined for label {lab}")
        per[str(lab)] = m
    mean = {}
    for k in ("dice", "nsd", "hd95", "cl_dice"):
        vals = [per[c][k] for c in per if not math.isnan(per[c][k])]
        mean[k] = float(np.mean(vals)) if vals else math.nan
    return MetricsReport(mean["dice"], mean["nsd"], mean["hd95"], mean["cl_dice"], tol_mm, convention, per, flags)
