"""Case pipeline, cross-validation and report tables.

One case: register the atlas to the query, derive a prompt per context,
run the backend, fuse, binarize, evaluate. Ablation rows (unregistered,
rigid only, rigid+affine, full registration, backend only) are read off the
same run, since each registration stage is unaffected by the stages after it.
"""
import csv
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from .backends import BackendError, BackendSpec, segment
from .fusion import FitConfig, FusionParams, binarize, fit_gate, fuse, kalman_gain, pseudo_triplets
from .io import FormatError, read_any, write_any
from .metrics import evaluate
from .prompting import EmptyPriorError, make_prompt
from .registration import RegConfig, RegistrationDiverged, register_pipeline
from .volume import ContractError, LabelMask, ProbMask, normalize_intensity
from .xform import DisplacementField, warp_mask

MODES = ("full", "atlas_only", "fm_only")
# ablation rows in table order; the first four mirror the incremental module table
METHODS = ("atlas_none", "atlas_rigid", "atlas_affine", "atlas_deform", "fm_only", "fused")
METRICS = ("dice", "nsd", "hd95", "cl_dice")
STAGES = ("registration", "foundation_model", "fusion")
_CASE_ERRORS = (RegistrationDiverged, BackendError, EmptyPriorError, ContractError, FormatError, OSError)


@dataclass
class MetricOptions:
    tol_mm: float = 1.0
    hd95_convention: str = "pooled"
    cl_dice: bool = True


@dataclass
class CaseConfig:
    atlas_image: str = ""
    atlas_mask: str = ""
    query_image: str = ""
    query_gt: str = ""
    contexts: list = dc_field(default_factory=list)  # empty: every atlas label, ascending
    registration: RegConfig = dc_field(default_factory=RegConfig)
    backend: BackendSpec = dc_field(default_factory=BackendSpec)
    prompt_kind: str = ""  # empty: the backend's own default
    fit: FitConfig = dc_field(default_factory=FitConfig)
    fusion_source: str = "fit"  # fit | load | fixed
    fusion_params: str = ""  # JSON path for "load"
    fixed_w: list = dc_field(default_factory=lambda: [0.0] * 6)
    fixed_b: float = 0.0
    mode: str = "full"
    normalize: bool = True
    metrics: MetricOptions = dc_field(default_factory=MetricOptions)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.registration, dict):
            self.registration = RegConfig(**self.registration)
        if isinstance(self.backend, dict):
            self.backend = BackendSpec(**self.backend)
        if isinstance(self.fit, dict):
            self.fit = FitConfig(**self.fit)
        if isinstance(self.metrics, dict):
            self.metrics = MetricOptions(**self.metrics)
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.fusion_source not in ("fit", "load", "fixed"):
            raise ContractError(f"unknown fusion source {self.fusion_source!r}")
        self.contexts = [int(c) for c in self.contexts]
        # the run seed drives pseudo-query augmentation
        self.fit.aug.seed = int(self.seed)

    @property
    def effective_prompt_kind(self):
        return self.prompt_kind or self.backend.prompt_kind

    def to_dict(self):
        return asdict(self)


@dataclass
class CaseInputs:
    atlas_img: object
    atlas_mask: LabelMask
    query_img: object
    query_gt: LabelMask = None


@dataclass
class ContextResult:
    label: int
    m_atlas: LabelMask
    m_fm: ProbMask
    gain: ProbMask
    m_final: LabelMask
    params: FusionParams
    fit_report: dict
    flags: list = dc_field(default_factory=list)


@dataclass
class CaseResult:
    case_id: str
    contexts: list
    per_context: dict = dc_field(default_factory=dict)  # label -> ContextResult
    metrics: dict = dc_field(default_factory=dict)  # method -> label -> {metric: value}
    timings: dict = dc_field(default_factory=dict)  # stage -> seconds
    registration: object = None
    error: str = ""
    fold: int = 0

    def combined(self, attr):
        """Label map combining per-context binary masks; earlier contexts win overlaps."""
        first = next(iter(self.per_context.values()))
        out = np.zeros(first.m_final.dims, dtype=np.int32)
        for lab in self.contexts:
            m = getattr(self.per_context[lab], attr).labels > 0
            out[(out == 0) & m] = lab
        return LabelMask.on(first.m_final.geometry, out)


def load_inputs(cfg):
    for name in ("atlas_image", "atlas_mask", "query_image"):
        if not getattr(cfg, name):
            raise ContractError(f"case config is missing {name}")
    gt = read_any(cfg.query_gt, "mask") if cfg.query_gt else None
    return CaseInputs(read_any(cfg.atlas_image, "volume"), read_any(cfg.atlas_mask, "mask"),
                      read_any(cfg.query_image, "volume"), gt)


def _prepare(inputs, cfg):
    a, q = inputs.atlas_img, inputs.query_img
    if cfg.normalize:
        a, q = normalize_intensity(a), normalize_intensity(q)
    return a, q


def _contexts(cfg, atlas_mask):
    ctx = cfg.contexts or atlas_mask.label_ids()
    if not ctx:
        raise EmptyPriorError("atlas mask has no labels")
    return list(ctx)


def _fm_for(cfg, query, m_atlas, label, gt):
    """Backend prediction for one context; an empty prior gives an empty prediction, flagged."""
    kind = cfg.effective_prompt_kind
    prompt = None
    if kind != "none":
        if not m_atlas.labels.any():
            if cfg.backend.kind != "oracle":
                return ProbMask.on(query.geometry, np.zeros(query.dims, np.float32)), ["empty prior: no prompt"]
        else:
            prompt = make_prompt(m_atlas, kind)
            prompt.context_label = label
    return segment(cfg.backend, query, prompt, gt=gt, context_label=label), []


def _oracle_gt(cfg, inputs, label):
    if cfg.backend.kind != "oracle" or cfg.backend.oracle.gt_mask_path:
        return None
    if inputs.query_gt is None:
        raise BackendError("oracle backend needs a query ground truth")
    return inputs.query_gt.binary(label)


def _load_params(path, labels):
    with open(path) as fh:
        d = json.load(fh)
    if "w" in d:
        p = FusionParams.from_dict(d)
        return {lab: p for lab in labels}
    return {lab: FusionParams.from_dict(d[str(lab)]) for lab in labels}


def fusion_for_support(support_img, support_mask, cfg, labels):
    """Gate parameters and fitting reports per label, following ``cfg.fusion_source`` and ``cfg.mode``."""
    if cfg.mode == "atlas_only":
        return {lab: (FusionParams.constant(True), {"selected": "atlas_only"}) for lab in labels}
    if cfg.mode == "fm_only":
        return {lab: (FusionParams.constant(False), {"selected": "fm_only"}) for lab in labels}
    if cfg.fusion_source == "load":
        return {lab: (p, {"selected": "loaded"}) for lab, p in _load_params(cfg.fusion_params, labels).items()}
    if cfg.fusion_source == "fixed":
        p = FusionParams(tuple(cfg.fixed_w), cfg.fixed_b)
        return {lab: (p, {"selected": "fixed"}) for lab in labels}
    trips = pseudo_triplets(support_img, support_mask, cfg.backend, cfg.registration, cfg.fit, labels,
                            cfg.effective_prompt_kind)
    return {lab: fit_gate(trips[lab], cfg.fit) for lab in labels}


def _evaluate_methods(res, reg, atlas_mask, gt, opts):
    geom = gt.geometry
    zero = DisplacementField.zeros(geom, 0.5)
    maps = {}
    for name, key in (("atlas_none", "none"), ("atlas_rigid", "rigid"), ("atlas_affine", "affine")):
        maps[name] = warp_mask(atlas_mask, reg.stages[key], zero, geom, "nearest")
    maps["atlas_deform"] = reg.warped_mask
    out = {m: {} for m in METHODS}
    for lab in res.contexts:
        c = res.per_context[lab]
        per = {name: maps[name].binary(lab) for name in maps}
        per["fm_only"] = binarize(c.m_fm)
        per["fused"] = c.m_final
        g = gt.binary(lab)
        for name, pred in per.items():
            rep = evaluate(pred, g, [1], opts.tol_mm, opts.hd95_convention, opts.cl_dice)
            out[name][lab] = rep.per_context["1"]
    return out


def run_case(cfg, inputs=None, case_id="case", fusion=None):
    """Full pipeline for one query.

    ``inputs`` overrides the paths in ``cfg``; ``fusion`` supplies
    precomputed per-label gate parameters (as from ``fusion_for_support``).
    Stage errors are caught and stored in ``CaseResult.error``.
    """
    res = CaseResult(case_id, [])
    try:
        inputs = inputs or load_inputs(cfg)
        _run(cfg, inputs, res, fusion)
    except _CASE_ERRORS as exc:
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def _run(cfg, inputs, res, fusion):
    atlas, query = _prepare(inputs, cfg)
    res.contexts = _contexts(cfg, inputs.atlas_mask)
    timings = dict.fromkeys(STAGES, 0.0)

    t0 = time.perf_counter()
    reg = register_pipeline(atlas, inputs.atlas_mask, query, cfg.registration)
    timings["registration"] = time.perf_counter() - t0
    res.registration = reg

    t0 = time.perf_counter()
    if fusion is None:
        fusion = fusion_for_support(atlas, inputs.atlas_mask, cfg, res.contexts)
    timings["fusion"] += time.perf_counter() - t0

    for lab in res.contexts:
        m_atlas = reg.warped_mask.binary(lab)
        t0 = time.perf_counter()
        if cfg.mode == "atlas_only":
            m_fm, flags = ProbMask.on(query.geometry, np.zeros(query.dims, np.float32)), []
        else:
            m_fm, flags = _fm_for(cfg, query, m_atlas, lab, _oracle_gt(cfg, inputs, lab))
        timings["foundation_model"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        params, report = fusion[lab]
        pa = ProbMask.from_mask(m_atlas)
        gain = kalman_gain(pa, m_fm, params)
        final = binarize(fuse(pa, m_fm, gain))
        timings["fusion"] += time.perf_counter() - t0
        res.per_context[lab] = ContextResult(lab, m_atlas, m_fm, gain, final, params, report, flags)
    res.timings = timings
    if inputs.query_gt is not None:
        res.metrics = _evaluate_methods(res, reg, inputs.atlas_mask, inputs.query_gt, cfg.metrics)


# ------------------------------------------------------------------ cross-validation


def read_manifest(path):
    """Dataset manifest: JSON list of ``{id, image, gt, contexts}``; relative paths resolve against it."""
    with open(path) as fh:
        items = json.load(fh)
    if not isinstance(items, list) or not items:
        raise ContractError("manifest must be a non-empty JSON list")
    base = os.path.dirname(os.path.abspath(path))
    seen, out = set(), []
    for it in items:
        missing = {"id", "image", "gt"} - set(it)
        if missing:
            raise ContractError(f"manifest entry lacks {sorted(missing)}")
        if it["id"] in seen:
            raise ContractError(f"duplicate case id {it['id']!r}")
        seen.add(it["id"])
        e = dict(it)
        for k in ("image", "gt"):
            e[k] = os.path.join(base, e[k])
            if not os.path.exists(e[k]):
                raise ContractError(f"case {it['id']}: {k} file {e[k]} not found")
        e["contexts"] = [int(c) for c in it.get("contexts", [])]
        out.append(e)
    return out


def make_folds(ids, n_folds=5, seed=0):
    """Seeded partition into folds, each with a support drawn from the other folds.

    Returns a list of ``{"fold", "queries", "support"}``.
    """
    ids = sorted(ids)
    if len(ids) < 2:
        raise ContractError("cross-validation needs at least two cases")
    n_folds = min(n_folds, len(ids))
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    folds = []
    for k, part in enumerate(np.array_split(np.arange(len(ids)), n_folds)):
        queries = sorted(perm[i] for i in part)
        rest = sorted(set(ids) - set(queries))
        support = rest[int(rng.integers(len(rest)))]
        folds.append({"fold": k, "queries": queries, "support": support})
    return folds


def _threads():
    try:
        return max(1, int(os.environ.get("ATLASFUSE_THREADS", "1")))
    except ValueError:
        return 1


def run_crossval(manifest, cfg, n_folds=5):
    """Cross-validated evaluation; returns ``(folds, results)`` with results sorted by case id."""
    cases = {c["id"]: c for c in manifest}
    folds = make_folds(list(cases), n_folds, cfg.seed)
    results = []
    for fold in folds:
        sup = cases[fold["support"]]
        s_img, s_mask = read_any(sup["image"], "volume"), read_any(sup["gt"], "mask")
        labels = cfg.contexts or sup["contexts"] or s_mask.label_ids()
        fcfg = CaseConfig(**{**_shallow(cfg), "contexts": list(labels)})
        s_norm = normalize_intensity(s_img) if cfg.normalize else s_img
        fusion, err = None, ""
        t0 = time.perf_counter()
        try:
            fusion = fusion_for_support(s_norm, s_mask, fcfg, list(labels))
        except _CASE_ERRORS as exc:
            err = f"{type(exc).__name__}: {exc}"
        fit_s = time.perf_counter() - t0

        def one(qid):
            q = cases[qid]
            if err:
                return CaseResult(qid, list(labels), error=err)
            inputs = CaseInputs(s_img, s_mask, read_any(q["image"], "volume"), read_any(q["gt"], "mask"))
            r = run_case(fcfg, inputs, qid, fusion)
            if r.timings:
                r.timings["fusion"] += fit_s / len(fold["queries"])
            return r

        with ThreadPoolExecutor(max_workers=_threads()) as pool:
            for r in pool.map(one, fold["queries"]):
                r.fold = fold["fold"]
                results.append(r)
    results.sort(key=lambda r: r.case_id)
    return folds, results


def _shallow(cfg):
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


# ------------------------------------------------------------------ reports


def percent(v):
    """Percent-style table cell: 0.8122 -> "81.22"; undefined -> "n/a"."""
    return "n/a" if v is None or math.isnan(v) else f"{100.0 * v:.2f}"


def _cell(metric, v):
    if v is None or math.isnan(v):
        return "n/a"
    return f"{v:.2f}" if metric == "hd95" else percent(v)


def _num(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)


def case_rows(results):
    """Flat per-case rows: case, fold, context, method and the four metrics."""
    rows = []
    for r in results:
        for m in METHODS:
            for lab in r.contexts:
                vals = r.metrics.get(m, {}).get(lab, {})
                rows.append({"case": r.case_id, "fold": r.fold, "context": lab, "method": m,
                             **{k: _num(vals.get(k, math.nan)) for k in METRICS}, "error": r.error})
    return rows


def aggregate(results):
    """Mean and std per method, context and metric over cases with defined values."""
    contexts = sorted({lab for r in results for lab in r.contexts})
    out = {}
    for m in METHODS:
        out[m] = {}
        for lab in contexts:
            out[m][str(lab)] = {}
            for k in METRICS:
                vals = [r.metrics[m][lab][k] for r in results
                        if m in r.metrics and lab in r.metrics[m] and not math.isnan(r.metrics[m][lab][k])]
                out[m][str(lab)][k] = {"mean": _num(np.mean(vals)) if vals else None,
                                       "std": _num(np.std(vals)) if vals else None, "n": len(vals)}
    return contexts, out


def metric_table(results, metric):
    """CSV text: rows = methods, columns = contexts then Mean (mean over contexts of the per-context means)."""
    contexts, agg = aggregate(results)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + [f"context_{c}" for c in contexts] + ["Mean"])
    if not results:
        return buf.getvalue()
    for m in METHODS:
        means = [agg[m][str(c)][metric]["mean"] for c in contexts]
        defined = [v for v in means if v is not None]
        overall = float(np.mean(defined)) if defined else math.nan
        w.writerow([m] + [_cell(metric, math.nan if v is None else v) for v in means] + [_cell(metric, overall)])
    return buf.getvalue()


def timing_table(results):
    """Per-stage mean wall time in min/image, laid out as Total then the three stages."""
    timed = [r for r in results if r.timings]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "min_per_image"])
    if not timed:
        return buf.getvalue()
    means = {s: float(np.mean([r.timings[s] for r in timed])) / 60.0 for s in STAGES}
    w.writerow(["Total", f"{sum(means.values()):.4f}"])
    for s, label in zip(STAGES, ("Registration", "Foundation model", "Fusion")):
        w.writerow([f"- {label}", f"{means[s]:.4f}"])
    return buf.getvalue()


def _rows_csv(rows):
    cols = ["case", "fold", "context", "method", *METRICS, "error"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]))
                    for k in cols})
    return buf.getvalue()


def _write(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def emit_report(results, out_dir, fmt="both", folds=None, extra=None):
    """Write per-case rows and per-metric tables (csv), and/or a summary (json).

    Contents depend only on the results, so equal runs give equal bytes;
    timings are not written here (see ``timing_table``).
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if fmt in ("csv", "both"):
        _write(os.path.join(out_dir, "cases.csv"), _rows_csv(case_rows(results)))
        written.append("cases.csv")
        for k in METRICS:
            _write(os.path.join(out_dir, f"table_{k}.csv"), metric_table(results, k))
            written.append(f"table_{k}.csv")
    if fmt in ("json", "both"):
        contexts, agg = aggregate(results)
        doc = {"contexts": contexts, "methods": list(METHODS), "summary": agg, "cases": case_rows(results)}
        if folds is not None:
            doc["folds"] = folds
        if extra:
            doc.update(extra)
        _write(os.path.join(out_dir, "report.json"), json.dumps(doc, indent=2, sort_keys=True) + "\n")
        written.append("report.json")
    return written


def write_case_outputs(res, out_dir):
    """Masks, gain maps, gate parameters, transforms and the loss trace of one case."""
    from .xform import save_affine, save_field

    os.makedirs(out_dir, exist_ok=True)
    if res.error or not res.per_context:
        return
    write_any(res.combined("m_atlas"), os.path.join(out_dir, "m_atlas.nii.gz"))
    write_any(res.combined("m_final"), os.path.join(out_dir, "m_final.nii.gz"))
    params = {}
    for lab, c in res.per_context.items():
        write_any(c.m_fm, os.path.join(out_dir, f"m_fm_{lab}.nii.gz"))
        write_any(c.gain, os.path.join(out_dir, f"gain_{lab}.nii.gz"))
        params[str(lab)] = {**c.params.to_dict(), "selected": c.fit_report.get("selected", ""),
                            "candidates": c.fit_report.get("candidates", {}), "flags": c.flags}
    _write(os.path.join(out_dir, "fusion_params.json"), json.dumps(params, indent=2, sort_keys=True) + "\n")
    reg = res.registration
    save_affine(reg.affine, os.path.join(out_dir, "affine.json"))
    save_field(reg.field, os.path.join(out_dir, "field"))
    write_loss_trace(reg.loss_trace, os.path.join(out_dir, "loss_trace.csv"))


def write_loss_trace(trace, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "factor", "iteration", "loss"])
    for stage, f, it, loss in trace:
        w.writerow([stage, f, it, repr(float(loss))])
    _write(path, buf.getvalue())
