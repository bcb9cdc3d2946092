"""Volume, label and probability grids sharing one geometry model.

Arrays are held as numpy ``(nx, ny, nz)`` in C order, so ``data[i, j, k]``
is voxel ``(i, j, k)``. The serialized order is x-fastest, i.e. Fortran
order of the same array. World position of voxel ``(i, j, k)`` is
``origin + spacing * (i, j, k)``.
"""
from dataclasses import dataclass

import numpy as np

from . import _kernels


class ContractError(ValueError):
    """Raised when an argument violates a documented precondition."""


@dataclass(frozen=True)
class Geometry:
    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ContractError("geometry needs three dims, spacings and origin coordinates")
        if min(dims) < 1:
            raise ContractError(f"dims must be >= 1, got {dims}")
        if not all(np.isfinite(spacing)) or min(spacing) <= 0:
            raise ContractError(f"spacing must be positive, got {spacing}")
        if not all(np.isfinite(origin)):
            raise ContractError("origin must be finite")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def extent(self):
        """Field-of-view extent per axis in mm (``dims * spacing``)."""
        return np.asarray(self.dims, dtype=np.float64) * np.asarray(self.spacing)

    @property
    def center(self):
        """World coordinate of the grid center."""
        return (np.asarray(self.origin)
                + np.asarray(self.spacing) * (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0)

    def voxel_to_world(self, idx):
        return np.asarray(self.origin) + np.asarray(self.spacing) * np.asarray(idx, dtype=np.float64)

    def world_to_voxel(self, p):
        return (np.asarray(p, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def same_as(self, other):
        return self.dims == other.dims and self.spacing == other.spacing and self.origin == other.origin


def _frozen(arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


class _Grid:
    """Common geometry plumbing for the three grid types."""

    __slots__ = ("geometry", "_array")

    def __init__(self, array, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        if array.ndim != 3:
            raise ContractError(f"expected a 3D array, got shape {array.shape}")
        self.geometry = Geometry(array.shape, spacing, origin)
        self._array = _frozen(array)

    @property
    def dims(self):
        return self.geometry.dims

    @property
    def spacing(self):
        return self.geometry.spacing

    @property
    def origin(self):
        return self.geometry.origin

    def _check_same(self, other):
        if not self.geometry.same_as(other.geometry):
            raise ContractError(f"geometry mismatch: {self.geometry} vs {other.geometry}")

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.dims}, spacing={self.spacing}, origin={self.origin})"


class Volume(_Grid):
    """Scalar intensity grid stored as float32."""

    __slots__ = ()

    def __init__(self, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        data = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(data)):
            raise ContractError("volume values must be finite")
        super().__init__(data, spacing, origin)

    @property
    def data(self):
        return self._array

    @classmethod
    def on(cls, geometry, data):
        return cls(data, geometry.spacing, geometry.origin)


class LabelMask(_Grid):
    """Non-negative integer labels; 0 is background."""

    __slots__ = ()

    def __init__(self, labels, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        labels = np.asarray(labels)
        if labels.dtype == bool:
            labels = labels.astype(np.int32)
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ContractError("labels must be integers")
        labels = labels.astype(np.int32)
        if labels.size and labels.min() < 0:
            raise ContractError("labels must be non-negative")
        super().__init__(labels, spacing, origin)

    @property
    def labels(self):
        return self._array

    @classmethod
    def on(cls, geometry, labels):
        return cls(labels, geometry.spacing, geometry.origin)

    def binary(self, label=None):
        """Binary mask of one label (or of all foreground if ``label`` is None)."""
        sel = self.labels > 0 if label is None else self.labels == label
        return LabelMask.on(self.geometry, sel.astype(np.int32))

    def label_ids(self):
        ids = np.unique(self.labels)
        return [int(i) for i in ids if i != 0]


class ProbMask(_Grid):
    """Per-voxel probabilities in [0, 1], stored as float32."""

    __slots__ = ()

    def __init__(self, values, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        values = np.asarray(values, dtype=np.float32)
        if not np.all((values >= 0.0) & (values <= 1.0)):
            raise ContractError("probabilities must lie in [0, 1]")
        super().__init__(values, spacing, origin)

    @property
    def values(self):
        return self._array

    @classmethod
    def on(cls, geometry, values):
        return cls(values, geometry.spacing, geometry.origin)

    @classmethod
    def from_mask(cls, mask):
        return cls.on(mask.geometry, (mask.labels > 0).astype(np.float32))


def trilinear_sample(v, p):
    """Sample ``v`` at continuous voxel coordinates with edge clamping.

    ``p`` may be a single ``(3,)`` point or an ``(N, 3)`` array.
    """
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.ascontiguousarray(np.atleast_2d(pts))
    if not np.all(np.isfinite(pts)):
        raise ContractError("sample coordinates must be finite")
    vals, _ = _kernels.sample_points(np.ascontiguousarray(v.data, dtype=np.float64), pts)
    return float(vals[0]) if single else vals


def spatial_gradient(v):
    """Central-difference gradient in intensity/mm; axes of length 1 give zero."""
    data = v.data.astype(np.float64)
    out = []
    for axis in range(3):
        if v.dims[axis] < 2:
            g = np.zeros_like(data)
        else:
            g = np.gradient(data, v.spacing[axis], axis=axis)
        out.append(Volume.on(v.geometry, g))
    return tuple(out)


def normalize_intensity(v, lo_pct=0.5, hi_pct=99.5):
    """Clip to the percentile window, then rescale to [0, 1].

    A window of zero width maps the whole volume to zeros.
    """
    if not 0.0 <= lo_pct < hi_pct <= 100.0:
        raise ContractError(f"need 0 <= lo_pct < hi_pct <= 100, got {lo_pct}, {hi_pct}")
    data = v.data.astype(np.float64)
    lo, hi = np.percentile(data, [lo_pct, hi_pct])
    if hi <= lo:
        return Volume.on(v.geometry, np.zeros(v.dims, dtype=np.float32))
    out = (np.clip(data, lo, hi) - lo) / (hi - lo)
    return Volume.on(v.geometry, np.clip(out, 0.0, 1.0))
