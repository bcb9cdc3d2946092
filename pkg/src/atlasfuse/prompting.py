"""Prompts derived from a warped atlas mask: click, box, mask, middle-slice box.

Tie-breaks use the linear index of the x-fastest layout,
``i + nx * (j + ny * k)``.
"""
import json
import os
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .volume import ContractError, LabelMask

KINDS = ("click", "box", "mask", "slicebox")


class EmptyPriorError(ValueError):
    """The mask a prompt should be derived from has no foreground."""


def linear_index(coords, dims):
    coords = np.asarray(coords)
    return coords[..., 0] + dims[0] * (coords[..., 1] + dims[1] * coords[..., 2])


def connected_components(mask, connectivity=26):
    """Label foreground components.

    Returns ``(labels, sizes)``: component ids start at 1 and are ordered
    by decreasing size, ties broken by the smaller minimum linear index.
    """
    if connectivity not in (6, 26):
        raise ContractError("connectivity must be 6 or 26")
    arr = mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)
    fg = np.ascontiguousarray(arr > 0, dtype=np.uint8)
    raw, n = _kernels.label_components(fg, connectivity)
    if n == 0:
        return np.zeros(fg.shape, dtype=np.int32), np.zeros(0, dtype=np.int64)
    flat = raw.ravel()
    sizes = np.bincount(flat, minlength=n + 1)[1:]
    idx = np.nonzero(flat)[0]
    coords = np.stack(np.unravel_index(idx, fg.shape), axis=-1)
    first = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(first, flat[idx] - 1, linear_index(coords, fg.shape).astype(np.int64))
    order = np.lexsort((first, -sizes))
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    return remap[raw], sizes[order]


@dataclass
class Prompt:
    kind: str
    context_label: int = 1
    click: tuple = None
    box: tuple = None  # (min corner, max corner), inclusive
    mask: LabelMask = None
    slice_index: int = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown prompt kind {self.kind!r}")
        if self.box is not None:
            lo, hi = self.box
            if any(a > b for a, b in zip(lo, hi)):
                raise ContractError("box min corner must not exceed max corner")

    def to_dict(self, mask_file=None):
        d = {"kind": self.kind, "context_label": int(self.context_label)}
        if self.click is not None:
            d["click"] = [int(c) for c in self.click]
        if self.box is not None:
            d["box"] = {"min": [int(c) for c in self.box[0]], "max": [int(c) for c in self.box[1]]}
        if self.slice_index is not None:
            d["slice_index"] = int(self.slice_index)
        if mask_file is not None:
            d["mask_file"] = mask_file
        return d


def _foreground(m):
    fg = m.labels > 0
    if not fg.any():
        raise EmptyPriorError("mask has no foreground voxels")
    return fg


def _round(x):
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def click_from_mask(m, connectivity=26):
    """Rounded centroid of the largest component, snapped onto it if it falls outside."""
    _foreground(m)
    comps, _ = connected_components(m, connectivity)
    coords = np.argwhere(comps == 1)
    c = _round(coords.mean(axis=0))
    if comps[tuple(c)] == 1:
        return Prompt("click", click=tuple(int(v) for v in c))
    sp = np.asarray(m.spacing)
    d2 = (((coords - c) * sp) ** 2).sum(axis=1)
    cand = coords[d2 == d2.min()]
    best = cand[np.argmin(linear_index(cand, m.dims))]
    return Prompt("click", click=tuple(int(v) for v in best))


def box_from_mask(m):
    coords = np.argwhere(_foreground(m))
    return Prompt("box", box=(tuple(int(v) for v in coords.min(axis=0)),
                              tuple(int(v) for v in coords.max(axis=0))))


def box_from_middle_slice(m):
    """2D box on the middle of the foreground z range (nearest non-empty slice if that one is empty)."""
    fg = _foreground(m)
    zs = np.nonzero(fg.any(axis=(0, 1)))[0]
    mid = (int(zs[0]) + int(zs[-1])) // 2
    z = int(zs[np.argmin(np.abs(zs - mid))])  # argmin keeps the lower z on ties
    ij = np.argwhere(fg[:, :, z])
    lo, hi = ij.min(axis=0), ij.max(axis=0)
    return Prompt("slicebox", box=((int(lo[0]), int(lo[1]), z), (int(hi[0]), int(hi[1]), z)), slice_index=z)


def make_prompt(m, kind, label=None, connectivity=26):
    """Prompt of ``kind`` from ``m``, restricted to ``label`` if given."""
    src = m.binary(label)
    if kind == "click":
        p = click_from_mask(src, connectivity)
    elif kind == "box":
        p = box_from_mask(src)
    elif kind == "slicebox":
        p = box_from_middle_slice(src)
    elif kind == "mask":
        _foreground(src)
        p = Prompt("mask", mask=src if label is not None else m)
    else:
        raise ContractError(f"unknown prompt kind {kind!r}")
    p.context_label = 1 if label is None else int(label)
    return p


def prompt_mask(prompt, geometry):
    """Voxels a prompt marks as foreground (click voxel, box interior, or the mask)."""
    out = np.zeros(geometry.dims, dtype=np.int32)
    if prompt.kind == "mask":
        out[prompt.mask.labels > 0] = 1
    elif prompt.kind == "click":
        out[prompt.click] = 1
    else:
        (a, b, c), (d, e, f) = prompt.box
        out[a:d + 1, b:e + 1, c:f + 1] = 1
    return LabelMask.on(geometry, out)


def write_prompt(prompt, path):
    """Write ``prompt.json``; a mask prompt also writes ``<stem>_mask.mvol.*`` beside it."""
    from .io import write_mvol

    mask_file = None
    if prompt.kind == "mask":
        stem = os.path.splitext(str(path))[0] + "_mask"
        write_mvol(prompt.mask, stem)
        mask_file = os.path.basename(stem) + ".mvol.json"
    with open(path, "w") as fh:
        json.dump(prompt.to_dict(mask_file), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_prompt(path):
    from .io import read_mvol

    with open(path) as fh:
        d = json.load(fh)
    mask = None
    if d.get("mask_file"):
        mask = read_mvol(os.path.join(os.path.dirname(os.path.abspath(path)), d["mask_file"]), "label")
    box = None
    if "box" in d:
        box = (tuple(d["box"]["min"]), tuple(d["box"]["max"]))
    click = tuple(d["click"]) if "click" in d else None
    return Prompt(d["kind"], d.get("context_label", 1), click, box, mask, d.get("slice_index"))
