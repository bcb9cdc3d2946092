"""NIfTI-1 (single file, optionally gzipped) and MVOL readers/writers.

Only the subset needed by the pipeline is supported: 3D grids, five
datatypes, origin and spacing. Any rotation in the qform/sform is dropped
with a warning; registration absorbs it anyway.
"""
import gzip
import json
import os
import struct
import warnings

import numpy as np

from .volume import LabelMask, ProbMask, Volume


class FormatError(ValueError):
    """Malformed or inconsistent file."""


class UnsupportedFormatError(FormatError):
    """Well-formed file using a feature outside the supported subset."""


_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_HDR_SIZE = 348
_DATA_OFFSET = 352


def _open(path, mode):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _parse_header(raw):
    if len(raw) < _HDR_SIZE:
        raise FormatError("file too short for a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == _HDR_SIZE:
            break
    else:
        raise FormatError("sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise FormatError(f"unsupported NIfTI magic {magic!r} (single-file n+1 only)")
    e = endian
    hdr = {
        "endian": e,
        "dim": struct.unpack_from(e + "8h", raw, 40),
        "datatype": struct.unpack_from(e + "h", raw, 70)[0],
        "pixdim": struct.unpack_from(e + "8f", raw, 76),
        "vox_offset": struct.unpack_from(e + "f", raw, 108)[0],
        "scl_slope": struct.unpack_from(e + "f", raw, 112)[0],
        "scl_inter": struct.unpack_from(e + "f", raw, 116)[0],
        "qform_code": struct.unpack_from(e + "h", raw, 252)[0],
        "sform_code": struct.unpack_from(e + "h", raw, 254)[0],
        "quatern": struct.unpack_from(e + "3f", raw, 256),
        "qoffset": struct.unpack_from(e + "3f", raw, 268),
        "srow": np.array(struct.unpack_from(e + "12f", raw, 280), dtype=np.float64).reshape(3, 4),
    }
    return hdr


def _geometry_from_header(hdr):
    ndim = hdr["dim"][0]
    if ndim < 1 or ndim > 7:
        raise FormatError(f"invalid dim[0] = {ndim}")
    dims = [max(1, int(d)) for d in hdr["dim"][1:1 + min(ndim, 3)]]
    dims += [1] * (3 - len(dims))
    if ndim > 3 and any(d > 1 for d in hdr["dim"][4:1 + ndim]):
        raise UnsupportedFormatError("volumes with more than three non-singleton dims are not supported")
    spacing = [abs(float(p)) if p != 0 else 1.0 for p in hdr["pixdim"][1:4]]
    origin = [0.0, 0.0, 0.0]
    rot = None
    if hdr["sform_code"] > 0:
        origin = hdr["srow"][:, 3].tolist()
        rot = hdr["srow"][:, :3]
    elif hdr["qform_code"] > 0:
        origin = [float(q) for q in hdr["qoffset"]]
        if any(abs(q) > 1e-6 for q in hdr["quatern"]):
            rot = "rotated"
    if rot is not None:
        if isinstance(rot, str) or not np.allclose(rot, np.diag(spacing), rtol=1e-5, atol=1e-6):
            warnings.warn("NIfTI orientation beyond origin/spacing is ignored", stacklevel=3)
    return tuple(dims), tuple(spacing), tuple(float(o) for o in origin)


def read_nifti(path, kind="auto"):
    """Read a ``.nii``/``.nii.gz`` file.

    ``kind`` is ``"volume"``, ``"mask"`` or ``"auto"``. Auto returns a
    LabelMask for unscaled, non-negative integer storage and a Volume
    otherwise.
    """
    with _open(path, "rb") as fh:
        raw = fh.read()
    hdr = _parse_header(raw)
    code = hdr["datatype"]
    if code not in _NIFTI_DTYPES:
        raise UnsupportedFormatError(f"unsupported NIfTI datatype code {code}")
    dims, spacing, origin = _geometry_from_header(hdr)
    dtype = np.dtype(_NIFTI_DTYPES[code]).newbyteorder(hdr["endian"])
    offset = max(int(hdr["vox_offset"]), _HDR_SIZE)
    count = dims[0] * dims[1] * dims[2]
    if len(raw) < offset + count * dtype.itemsize:
        raise FormatError("NIfTI payload is shorter than the header dims imply")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    arr = flat.reshape(dims, order="F")
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    scaled = slope != 0 and np.isfinite(slope) and not (slope == 1 and inter == 0)
    if scaled:
        arr = arr.astype(np.float64) * slope + inter
    if kind == "auto":
        integral = np.issubdtype(arr.dtype, np.integer)
        kind = "mask" if integral and (arr.size == 0 or arr.min() >= 0) else "volume"
    if kind == "mask":
        return LabelMask(np.ascontiguousarray(arr), spacing, origin)
    if kind == "volume":
        return Volume(np.ascontiguousarray(arr), spacing, origin)
    raise ValueError(f"unknown kind {kind!r}")


def _payload(obj):
    if isinstance(obj, LabelMask):
        labels = obj.labels
        if labels.size and labels.max() <= 255:
            return 2, labels.astype(np.uint8)
        return 8, labels.astype(np.int32)
    if isinstance(obj, ProbMask):
        return 16, obj.values.astype(np.float32)
    return 16, obj.data.astype(np.float32)


def write_nifti(obj, path):
    """Write a Volume, LabelMask or ProbMask as single-file NIfTI-1 (little endian)."""
    code, arr = _payload(obj)
    hdr = bytearray(_DATA_OFFSET)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *obj.dims, 1, 1, 1, 1)
    struct.pack_into("<hhh", hdr, 70, code, arr.dtype.itemsize * 8, 0)
    struct.pack_into("<8f", hdr, 76, 1.0, *obj.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<fff", hdr, 108, float(_DATA_OFFSET), 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # mm
    struct.pack_into("<hh", hdr, 252, 1, 1)
    struct.pack_into("<3f", hdr, 268, *obj.origin)
    sx, sy, sz = obj.spacing
    ox, oy, oz = obj.origin
    struct.pack_into("<12f", hdr, 280, sx, 0, 0, ox, 0, sy, 0, oy, 0, 0, sz, oz)
    hdr[344:348] = b"n+1\x00"
    body = np.asarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes(order="F")
    if str(path).endswith(".gz"):
        # no mtime or name in the gzip header: bytes depend on content only
        with open(path, "wb") as raw_fh, gzip.GzipFile(filename="", fileobj=raw_fh, mode="wb", mtime=0) as fh:
            fh.write(bytes(hdr) + body)
    else:
        with open(path, "wb") as fh:
            fh.write(bytes(hdr) + body)


_MVOL_KINDS = {"volume": Volume, "label": LabelMask, "prob": ProbMask}


def _mvol_paths(path):
    path = str(path)
    if path.endswith(".mvol.json"):
        stem = path[: -len(".mvol.json")]
    elif path.endswith(".json"):
        stem = path[: -len(".json")]
    else:
        stem = path
    return stem + ".mvol.json", stem + ".mvol.raw"


def write_mvol(obj, path):
    """Write ``<stem>.mvol.json`` plus ``<stem>.mvol.raw``; returns the manifest path."""
    manifest_path, raw_path = _mvol_paths(path)
    if isinstance(obj, LabelMask):
        kind, arr = "label", obj.labels.astype("<i4")
    elif isinstance(obj, ProbMask):
        kind, arr = "prob", obj.values.astype("<f4")
    else:
        kind, arr = "volume", obj.data.astype("<f4")
    manifest = {
        "dims": list(obj.dims),
        "spacing": list(obj.spacing),
        "origin": list(obj.origin),
        "dtype": "int32" if kind == "label" else "float32",
        "kind": kind,
        "data_file": os.path.basename(raw_path),
    }
    with open(raw_path, "wb") as fh:
        fh.write(arr.tobytes(order="F"))
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


_MVOL_DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4", "int16": "<i2", "uint8": "u1"}


def read_mvol(path, kind=None):
    """Read an MVOL pair. ``kind`` overrides the manifest's ``kind`` field."""
    manifest_path, _ = _mvol_paths(path)
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad MVOL manifest: {exc}") from exc
    for key in ("dims", "spacing", "origin", "dtype", "data_file"):
        if key not in manifest:
            raise FormatError(f"MVOL manifest lacks {key!r}")
    data_file = manifest["data_file"]
    if not isinstance(data_file, str) or not data_file:
        raise FormatError("MVOL manifest has an empty data_file")
    if manifest["dtype"] not in _MVOL_DTYPES:
        raise UnsupportedFormatError(f"unsupported MVOL dtype {manifest['dtype']!r}")
    dims = tuple(int(d) for d in manifest["dims"])
    if len(dims) != 3:
        raise FormatError("MVOL dims must have three entries")
    raw_path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), data_file)
    with open(raw_path, "rb") as fh:
        raw = fh.read()
    dtype = np.dtype(_MVOL_DTYPES[manifest["dtype"]])
    count = dims[0] * dims[1] * dims[2]
    if len(raw) != count * dtype.itemsize:
        raise FormatError(f"MVOL data holds {len(raw) // dtype.itemsize} values, manifest expects {count}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F")
    if kind is None:
        kind = manifest.get("kind")
        if kind is None:
            kind = "label" if np.issubdtype(dtype, np.integer) else "volume"
    if kind not in _MVOL_KINDS:
        raise FormatError(f"unknown MVOL kind {kind!r}")
    return _MVOL_KINDS[kind](np.ascontiguousarray(arr), manifest["spacing"], manifest["origin"])


def read_any(path, kind="auto"):
    """Dispatch on suffix: ``.mvol.json`` goes to MVOL, anything else to NIfTI."""
    if str(path).endswith(".json"):
        mvol_kind = {"volume": "volume", "mask": "label", "prob": "prob"}.get(kind)
        return read_mvol(path, mvol_kind)
    if kind == "prob":
        v = read_nifti(path, "volume")
        return ProbMask.on(v.geometry, v.data)
    return read_nifti(path, kind)


def write_any(obj, path):
    if str(path).endswith(".json"):
        return write_mvol(obj, path)
    write_nifti(obj, path)
    return str(path)
