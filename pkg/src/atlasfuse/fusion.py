"""Atlas/backend fusion through a per-voxel gain ``K``.

``M_final = (1 - K) * M_fm + K * M_atlas`` with
``K = sigmoid(sum_i w_i * P_i + b)``, where ``P`` are the atlas and backend
masks max-pooled with windows 3, 5 and 7. The seven gate parameters are
fitted at test time on pseudo-queries built from the single support.
"""
import json
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy.ndimage import maximum_filter

from .volume import ContractError, LabelMask, ProbMask

KERNELS = (3, 5, 7)
SATURATION = 40.0
_F32_EPS = float(np.finfo(np.float32).eps)


@dataclass
class FusionParams:
    """Gate weights ordered (atlas k3, k5, k7, fm k3, k5, k7) and bias."""

    w: tuple = (0.0,) * 6
    b: float = 0.0

    def __post_init__(self):
        w = tuple(float(x) for x in self.w)
        if len(w) != 6 or not np.all(np.isfinite(w)) or not np.isfinite(self.b):
            raise ContractError("fusion params need six finite weights and a finite bias")
        self.w = w
        self.b = float(self.b)

    def vector(self):
        return np.r_[self.w, self.b]

    @classmethod
    def from_vector(cls, v):
        return cls(tuple(v[:6]), v[6])

    @classmethod
    def constant(cls, k_one):
        """Saturated gate: K == 1 (atlas only) or K == 0 (backend only)."""
        return cls((0.0,) * 6, SATURATION if k_one else -SATURATION)

    def to_dict(self):
        return {"w": list(self.w), "b": self.b}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["w"]), d["b"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class AugConfig:
    max_disp_vox: float = 6.0
    smooth_sigma_vox: float = 8.0
    seed: int = 0


@dataclass
class FitConfig:
    lr: float = 3.0
    iters: int = 100
    n_pseudo_queries: int = 3
    aug: AugConfig = dc_field(default_factory=AugConfig)
    dice_eps: float = 1.0
    mode: str = "augment"  # augment | self
    gate: str = "voxel"  # voxel | scalar

    def __post_init__(self):
        if isinstance(self.aug, dict):
            self.aug = AugConfig(**self.aug)
        if self.lr <= 0 or self.iters < 0 or self.dice_eps <= 0:
            raise ContractError("need lr > 0, iters >= 0, dice_eps > 0")
        if self.mode not in ("augment", "self"):
            raise ContractError(f"unknown fitting mode {self.mode!r}")
        if self.gate not in ("voxel", "scalar"):
            raise ContractError(f"unknown gate {self.gate!r}")

    def to_dict(self):
        return asdict(self)


def _values(m):
    if isinstance(m, ProbMask):
        return m.values
    if isinstance(m, LabelMask):
        return (m.labels > 0).astype(np.float32)
    return np.asarray(m)


def _check(a, b):
    if hasattr(a, "geometry") and hasattr(b, "geometry") and not a.geometry.same_as(b.geometry):
        raise ContractError("fusion inputs must share a geometry")


def maxpool3d(m, k):
    """Same-size stride-1 sliding maximum; windows are clipped at the borders."""
    if k < 1 or k % 2 == 0:
        raise ContractError("pooling window must be a positive odd integer")
    out = maximum_filter(_values(m), size=k, mode="nearest")
    return ProbMask.on(m.geometry, out) if hasattr(m, "geometry") else out


def pooled_features(m_atlas, m_fm):
    """The six pooled maps in parameter order, as a (6, nx, ny, nz) float64 stack."""
    a, f = _values(m_atlas), _values(m_fm)
    return np.stack([maximum_filter(src, size=k, mode="nearest").astype(np.float64)
                     for src in (a, f) for k in KERNELS])


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def gain_logits(P, params):
    return np.tensordot(np.asarray(params.w), P, axes=1) + params.b


def kalman_gain(m_atlas, m_fm, params):
    """Gain map K in [0, 1]; within float32 epsilon of an end it is snapped to that end."""
    _check(m_atlas, m_fm)
    k = _sigmoid(gain_logits(pooled_features(m_atlas, m_fm), params))
    k = np.where(k < _F32_EPS, 0.0, np.where(k > 1.0 - _F32_EPS, 1.0, k))
    return ProbMask.on(m_atlas.geometry, k)


def fuse(m_atlas, m_fm, K):
    """Per-voxel convex combination ``(1 - K) * m_fm + K * m_atlas``."""
    _check(m_atlas, m_fm)
    k = _values(K).astype(np.float64)
    a = _values(m_atlas).astype(np.float64)
    f = _values(m_fm).astype(np.float64)
    out = (1.0 - k) * f + k * a
    return ProbMask.on(m_atlas.geometry, np.clip(out, np.minimum(a, f), np.maximum(a, f)))


def binarize(m, thresh=0.5):
    return LabelMask.on(m.geometry, (_values(m) >= thresh).astype(np.int32))


def soft_dice_loss(pred, gt, eps=1.0):
    """``1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`` and its gradient wrt ``pred``."""
    p = np.asarray(_values(pred), dtype=np.float64)
    g = np.asarray(_values(gt), dtype=np.float64)
    inter = float(np.sum(p * g))
    s = float(np.sum(p)) + float(np.sum(g)) + eps
    num = 2.0 * inter + eps
    return 1.0 - num / s, -(2.0 * g * s - num) / (s * s)


class Triplet:
    """One fitting example restricted to the voxels where atlas and backend disagree.

    Elsewhere the fused value equals both inputs for any K, so those voxels
    only contribute constant sums to the Dice terms.
    """

    def __init__(self, m_atlas, m_fm, gt):
        a = _values(m_atlas).astype(np.float64)
        f = _values(m_fm).astype(np.float64)
        g = _values(gt).astype(np.float64)
        P = pooled_features(m_atlas, m_fm)
        d = a - f
        act = d != 0
        self.f, self.d, self.g = f[act], d[act], g[act]
        self.P = P[:, act]
        rest = ~act
        self.inter0 = float(np.sum(f[rest] * g[rest]))
        self.sum0 = float(np.sum(f[rest])) + float(np.sum(g))

    def loss_grad(self, theta, eps, clamp=False):
        z = self.P.T @ theta[:6] + theta[6]
        k = _sigmoid(z)
        if clamp:
            k = np.where(k < _F32_EPS, 0.0, np.where(k > 1.0 - _F32_EPS, 1.0, k))
        p = self.f + k * self.d
        inter = self.inter0 + float(np.sum(p * self.g))
        s = self.sum0 + float(np.sum(p)) + eps
        num = 2.0 * inter + eps
        dl_dp = -(2.0 * self.g * s - num) / (s * s)
        r = dl_dp * self.d * k * (1.0 - k)
        grad = np.r_[self.P @ r, np.sum(r)]
        return 1.0 - num / s, grad


def fusion_objective(triplets, theta, eps=1.0, clamp=False):
    """Summed soft-Dice loss over triplets and its gradient wrt the 7 gate parameters."""
    theta = np.asarray(theta, dtype=np.float64)
    loss, grad = 0.0, np.zeros(7)
    for t in triplets:
        l, g = t.loss_grad(theta, eps, clamp)
        loss += l
        grad += g
    return loss, grad


def fit_gate(triplets, cfg):
    """Plain gradient descent from zero, then safeguard selection.

    Returns ``(params, report)``; the report lists each candidate's summed
    support loss and which one won.
    """
    theta = np.zeros(7)
    trace = []
    for _ in range(cfg.iters):
        loss, g = fusion_objective(triplets, theta, cfg.dice_eps)
        trace.append(loss)
        if cfg.gate == "scalar":
            g[:6] = 0.0
        theta = theta - cfg.lr * g
    cands = []
    if cfg.iters > 0:
        cands.append(("fitted", FusionParams.from_vector(theta)))
    cands += [("fm_only", FusionParams.constant(False)), ("atlas_only", FusionParams.constant(True))]
    scored = [(name, p, fusion_objective(triplets, p.vector(), cfg.dice_eps, clamp=True)[0]) for name, p in cands]
    best = min(scored, key=lambda c: c[2])  # first wins ties
    report = {"trace": trace, "candidates": {n: l for n, _, l in scored}, "selected": best[0]}
    return best[1], report


def pseudo_triplets(support_img, support_mask, backend, reg_cfg, fit_cfg, labels=(None,), prompt_kind=None):
    """Fitting triplets per label, from one set of pseudo-queries.

    Each pseudo-query is the support warped by a random smooth field (or
    the support itself in ``self`` mode); the support is registered to it,
    prompted per label, and segmented. Returns ``{label: [Triplet, ...]}``.
    """
    from .backends import segment
    from .prompting import make_prompt
    from .registration import register_pipeline
    from .xform import AffineTransform, random_smooth_field, warp_mask, warp_volume

    rng = np.random.default_rng(fit_cfg.aug.seed)
    kind = prompt_kind or backend.prompt_kind
    geom = support_img.geometry
    out = {lab: [] for lab in labels}
    for _ in range(fit_cfg.n_pseudo_queries):
        sub = np.random.default_rng(int(rng.integers(1 << 62)))
        if fit_cfg.mode == "self":
            q_img, q_gt = support_img, support_mask
        else:
            psi = random_smooth_field(geom, fit_cfg.aug.max_disp_vox, fit_cfg.aug.smooth_sigma_vox, sub)
            ident = AffineTransform.identity(geom.center)
            q_img = warp_volume(support_img, ident, psi, geom)
            q_gt = warp_mask(support_mask, ident, psi, geom, "nearest")
        reg = register_pipeline(support_img, support_mask, q_img, reg_cfg)
        for lab in labels:
            m_atlas = reg.warped_mask.binary(lab)
            gt = q_gt.binary(lab)
            prompt = None
            if kind != "none" and m_atlas.labels.any():
                prompt = make_prompt(m_atlas, kind)
                prompt.context_label = 1 if lab is None else int(lab)
            if prompt is None and kind != "none" and backend.kind != "oracle":
                m_fm = ProbMask.on(geom, np.zeros(geom.dims, dtype=np.float32))
            else:
                m_fm = segment(backend, q_img, prompt, gt=gt)
            out[lab].append(Triplet(ProbMask.from_mask(m_atlas), m_fm, gt))
    return out


def fit_fusion(support_img, support_mask, backend, reg_cfg, fit_cfg, label=None, prompt_kind=None):
    """Fit the gate for one label on pseudo-queries built from the support.

    Returns ``(params, report)``.
    """
    trips = pseudo_triplets(support_img, support_mask, backend, reg_cfg, fit_cfg, (label,), prompt_kind)
    return fit_gate(trips[label], fit_cfg)
