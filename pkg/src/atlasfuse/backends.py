"""Segmentation backends behind one call: ``segment(spec, query, prompt)``.

Two built-ins make the pipeline self-contained (a corrupted ground-truth
oracle and intensity region growing); anything else runs as an external
process exchanging MVOL files through a request directory.
"""
import json
import os
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy import ndimage

from .io import FormatError, read_any, read_mvol, write_mvol
from .prompting import EmptyPriorError, connected_components
from .volume import ContractError, LabelMask, ProbMask


class BackendError(RuntimeError):
    """Backend failure; ``diagnostics`` holds captured output when available."""

    def __init__(self, msg, diagnostics=""):
        super().__init__(msg if not diagnostics else f"{msg}\n{diagnostics}")
        self.diagnostics = diagnostics


@dataclass
class Corruption:
    erode_r: int = 0
    dilate_r: int = 0
    drop_component_prob: float = 0.0
    boundary_noise_prob: float = 0.0
    seed: int = 0
    # components (by size rank, 0 = largest) removed unconditionally
    drop_rank: list = dc_field(default_factory=list)


@dataclass
class OracleSpec:
    gt_mask_path: str = ""
    corruption: Corruption = dc_field(default_factory=Corruption)


@dataclass
class RegionGrowSpec:
    k_sigma: float = 2.5
    max_iters: int = 200


@dataclass
class ExternalSpec:
    command: list = dc_field(default_factory=list)
    workdir: str = ""
    timeout_s: float = 600.0


@dataclass
class BackendSpec:
    kind: str = "oracle"  # oracle | region_grow | external
    prompt_kind: str = "mask"  # click | box | mask | slicebox | none
    oracle: OracleSpec = dc_field(default_factory=OracleSpec)
    region_grow: RegionGrowSpec = dc_field(default_factory=RegionGrowSpec)
    external: ExternalSpec = dc_field(default_factory=ExternalSpec)

    def __post_init__(self):
        if isinstance(self.oracle, dict):
            o = dict(self.oracle)
            o["corruption"] = Corruption(**o.get("corruption", {}))
            self.oracle = OracleSpec(**o)
        if isinstance(self.region_grow, dict):
            self.region_grow = RegionGrowSpec(**self.region_grow)
        if isinstance(self.external, dict):
            self.external = ExternalSpec(**self.external)
        self.kind = self.kind.lower().replace("-", "_")
        if self.kind not in ("oracle", "region_grow", "external"):
            raise ContractError(f"unknown backend kind {self.kind!r}")
        c = self.oracle.corruption
        if c.erode_r < 0 or c.dilate_r < 0:
            raise ContractError("corruption radii must be >= 0")
        for p in (c.drop_component_prob, c.boundary_noise_prob):
            if not 0.0 <= p <= 1.0:
                raise ContractError("corruption probabilities must lie in [0, 1]")
        if self.external.timeout_s <= 0:
            raise ContractError("timeout must be positive")

    @property
    def promptable(self):
        return self.prompt_kind != "none"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


def ball(r):
    """Euclidean ball structuring element of integer radius ``r``."""
    g = np.arange(-r, r + 1)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    return x * x + y * y + z * z <= r * r


def boundary_voxels(fg):
    """Voxels whose value differs from at least one in-grid 6-neighbour."""
    out = np.zeros(fg.shape, dtype=bool)
    for axis in range(3):
        d = np.diff(fg.astype(np.int8), axis=axis) != 0
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        out[tuple(lo)] |= d
        out[tuple(hi)] |= d
    return out


def corrupt(gt, c):
    """Erode, dilate, drop components, flip boundary voxels; in that order."""
    rng = np.random.default_rng(c.seed)
    fg = np.asarray(gt) > 0
    if c.erode_r > 0:
        fg = ndimage.binary_erosion(fg, ball(c.erode_r))
    if c.dilate_r > 0:
        fg = ndimage.binary_dilation(fg, ball(c.dilate_r))
    if c.drop_component_prob > 0 or c.drop_rank:
        comps, sizes = connected_components(fg, 26)
        draws = rng.random(len(sizes))
        drop = draws < c.drop_component_prob
        for r in c.drop_rank:
            if 0 <= r < len(sizes):
                drop[r] = True
        fg = fg & ~np.isin(comps, np.nonzero(drop)[0] + 1)
    if c.boundary_noise_prob > 0:
        b = boundary_voxels(fg)
        flip = b & (rng.random(fg.shape) < c.boundary_noise_prob)
        fg = fg ^ flip
    return fg


def _seeds(prompt, dims):
    seeds = np.zeros(dims, dtype=bool)
    clip = None
    if prompt.kind == "click":
        seeds[tuple(prompt.click)] = True
    elif prompt.kind == "mask":
        seeds |= prompt.mask.labels > 0
    else:
        lo, hi = np.asarray(prompt.box[0]), np.asarray(prompt.box[1])
        seeds[tuple((lo + hi) // 2)] = True
        clip = (lo, hi)
    return seeds, clip


def region_grow(data, seeds, k_sigma=2.5, max_iters=200, clip=None):
    """Grow from ``seeds`` into 26-neighbours within mean +- k*std of the region.

    Statistics are refreshed every iteration. While the region is smaller
    than one 3x3x3 block they are taken over the seeds' 26-neighbourhood so
    a single seed still has a usable spread.
    """
    region = seeds.copy()
    allowed = np.ones(data.shape, dtype=bool)
    if clip is not None:
        allowed[:] = False
        (a, b, c), (d, e, f) = clip
        allowed[a:d + 1, b:e + 1, c:f + 1] = True
    cube = np.ones((3, 3, 3), dtype=bool)
    for _ in range(max_iters):
        idx = np.argwhere(region)
        lo = np.maximum(idx.min(axis=0) - 1, 0)
        hi = np.minimum(idx.max(axis=0) + 2, data.shape)
        win = tuple(slice(l, h) for l, h in zip(lo, hi))
        r = region[win]
        grown = ndimage.binary_dilation(r, cube)
        stats = data[win][grown] if r.sum() < 27 else data[win][r]
        mean, std = stats.mean(), stats.std()
        vals = data[win]
        cand = grown & ~r & allowed[win] & (np.abs(vals - mean) <= k_sigma * std)
        if not cand.any():
            break
        region[win] |= cand
    return region


def _oracle_gt(spec, context_label, gt):
    if gt is None:
        if not spec.oracle.gt_mask_path:
            raise BackendError("oracle backend needs gt_mask_path")
        gt = read_any(spec.oracle.gt_mask_path, "mask")
    labels = gt.labels
    return labels == context_label if context_label is not None and labels.max() > 1 else labels > 0


def segment(spec, query, prompt=None, gt=None, context_label=None):
    """Probability mask on the query grid.

    ``gt`` overrides the oracle's ground-truth file (used when fitting
    fusion on synthetic pseudo-queries).
    """
    if spec.promptable and prompt is None and spec.kind != "oracle":
        raise EmptyPriorError("promptable backend called without a prompt")
    label = context_label if context_label is not None else (prompt.context_label if prompt else None)
    if spec.kind == "oracle":
        if gt is not None and not gt.geometry.same_as(query.geometry):
            raise ContractError("oracle ground truth does not match the query geometry")
        fg = corrupt(_oracle_gt(spec, label, gt), spec.oracle.corruption)
        return ProbMask.on(query.geometry, fg.astype(np.float32))
    if spec.kind == "region_grow":
        seeds, clip = _seeds(prompt, query.dims)
        if not seeds.any():
            raise EmptyPriorError("prompt marks no seed voxels")
        rg = spec.region_grow
        fg = region_grow(query.data.astype(np.float64), seeds, rg.k_sigma, rg.max_iters, clip)
        return ProbMask.on(query.geometry, fg.astype(np.float32))
    return external_roundtrip(spec, query, prompt)


def write_request(reqdir, query, prompt):
    """Populate a request directory; returns the parsed request dictionary."""
    write_mvol(query, os.path.join(reqdir, "query"))
    pd = None
    if prompt is not None:
        mask_file = None
        if prompt.kind == "mask":
            write_mvol(prompt.mask, os.path.join(reqdir, "prompt_mask"))
            mask_file = "prompt_mask.mvol.json"
        pd = prompt.to_dict(mask_file)
    request = {"version": 1, "volume": "query.mvol.json", "prompt": pd, "expected_output": "mask.mvol.json"}
    with open(os.path.join(reqdir, "request.json"), "w") as fh:
        json.dump(request, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return request


def external_roundtrip(spec, query, prompt):
    ext = spec.external
    if not ext.command:
        raise BackendError("external backend has no command")
    base = ext.workdir or None
    if base:
        os.makedirs(base, exist_ok=True)
    reqdir = tempfile.mkdtemp(prefix="request_", dir=base)
    request = write_request(reqdir, query, prompt)
    cmd = list(ext.command) + [reqdir]
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=ext.timeout_s)
    except subprocess.TimeoutExpired as exc:
        raise BackendError(f"external backend timed out after {ext.timeout_s}s",
                           f"stdout:\n{exc.stdout or ''}\nstderr:\n{exc.stderr or ''}") from exc
    except OSError as exc:
        raise BackendError(f"could not start external backend: {exc}") from exc
    diag = f"stdout:\n{proc.stdout}\nstderr:\n{proc.stderr}"
    if proc.returncode != 0:
        raise BackendError(f"external backend exited with status {proc.returncode}", diag)
    out = os.path.join(reqdir, request["expected_output"])
    try:
        mask = read_mvol(out, "prob")
    except (OSError, FormatError, ContractError) as exc:
        raise BackendError(f"malformed backend response: {exc}", diag) from exc
    if not mask.geometry.same_as(query.geometry):
        raise BackendError(f"backend output geometry {mask.geometry} does not match query {query.geometry}", diag)
    return mask


def mask_to_prob(m):
    return ProbMask.from_mask(m) if isinstance(m, LabelMask) else m
