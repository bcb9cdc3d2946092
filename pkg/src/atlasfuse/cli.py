"""Command-line entry point: ``atlasfuse <subcommand> ...``."""
import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .backends import BackendError, BackendSpec, segment
from .config import apply_overrides, case_config, load_toml, write_resolved
from .fusion import FitConfig, FusionParams, binarize, fit_fusion, fuse, kalman_gain
from .io import FormatError, read_any, write_any
from .metrics import evaluate
from .phantoms import KINDS, DeformSpec, GlobalSpec, PhantomSpec, generate_phantom
from .pipeline import (CaseConfig, emit_report, read_manifest, run_case, run_crossval, timing_table,
                       write_case_outputs, write_loss_trace)
from .prompting import KINDS as PROMPT_KINDS, EmptyPriorError, make_prompt, read_prompt, write_prompt
from .registration import RegConfig, RegistrationDiverged, register_pipeline
from .volume import ContractError, LabelMask, ProbMask, normalize_intensity
from .xform import save_affine, save_field

_USER_ERRORS = (ContractError, FormatError, BackendError, EmptyPriorError, RegistrationDiverged, OSError)


def _dims(v):
    return tuple(v) * 3 if len(v) == 1 else tuple(v)


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _spec(args, deform_seed):
    return PhantomSpec(kind=args.kind, dims=_dims(args.dims), noise_sigma=args.noise,
                       deform=DeformSpec(args.max_disp, args.sigma, deform_seed),
                       misalign=GlobalSpec(tuple(args.rot), tuple(args.shift), tuple(args.scale)),
                       seed=args.seed)


def cmd_phantom(args):
    os.makedirs(args.out, exist_ok=True)
    if args.cases:
        # one atlas shape, several independently warped copies
        rng = np.random.default_rng(args.seed)
        items = []
        for i in range(args.cases):
            spec = _spec(args, int(rng.integers(1 << 30)))
            spec.misalign = GlobalSpec(tuple(float(v) for v in rng.uniform(-5, 5, 3)),
                                       tuple(float(v) for v in rng.uniform(-2, 2, 3)),
                                       tuple(float(v) for v in rng.uniform(0.95, 1.05, 3)))
            ph = generate_phantom(spec)
            cid = f"case_{i:03d}"
            write_any(ph.query_img, os.path.join(args.out, f"{cid}.nii.gz"))
            write_any(ph.query_gt, os.path.join(args.out, f"{cid}_gt.nii.gz"))
            items.append({"id": cid, "image": f"{cid}.nii.gz", "gt": f"{cid}_gt.nii.gz",
                          "contexts": ph.atlas_mask.label_ids()})
        _dump_json(items, os.path.join(args.out, "manifest.json"))
        return 0
    spec = _spec(args, args.deform_seed)
    ph = generate_phantom(spec)
    out = args.out
    write_any(ph.atlas_img, os.path.join(out, "atlas.nii.gz"))
    write_any(ph.atlas_mask, os.path.join(out, "atlas_mask.nii.gz"))
    write_any(ph.query_img, os.path.join(out, "query.nii.gz"))
    write_any(ph.query_gt, os.path.join(out, "query_gt.nii.gz"))
    save_affine(ph.true_affine, os.path.join(out, "true_affine.json"))
    save_field(ph.true_field, os.path.join(out, "true_field"))
    _dump_json(spec.to_dict(), os.path.join(out, "phantom.json"))
    return 0


def _reg_cfg(args, base=None):
    cfg = base or RegConfig()
    if args.no_rigid:
        cfg.enable_rigid = False
    if args.no_affine:
        cfg.enable_affine = False
    if args.no_deform:
        cfg.enable_deform = False
    if args.reg_lambda is not None:
        cfg.smooth_lambda = args.reg_lambda
    if args.iters is not None:
        cfg.deform_iters = args.iters
    if args.loss:
        cfg.loss = args.loss
    return cfg


def cmd_register(args):
    atlas = read_any(args.atlas, "volume")
    mask = read_any(args.atlas_mask, "mask")
    query = read_any(args.query, "volume")
    if not args.no_normalize:
        atlas, query = normalize_intensity(atlas), normalize_intensity(query)
    cfg = _reg_cfg(args)
    res = register_pipeline(atlas, mask, query, cfg)
    os.makedirs(args.out, exist_ok=True)
    write_any(res.warped_image, os.path.join(args.out, "warped_image.nii.gz"))
    write_any(res.warped_mask, os.path.join(args.out, "warped_mask.nii.gz"))
    save_affine(res.affine, os.path.join(args.out, "affine.json"))
    save_field(res.field, os.path.join(args.out, "field"))
    write_loss_trace(res.loss_trace, os.path.join(args.out, "loss_trace.csv"))
    _dump_json(cfg.to_dict(), os.path.join(args.out, "registration.json"))
    return 0


def cmd_prompt(args):
    m = read_any(args.mask, "mask")
    p = make_prompt(m, args.kind, args.label)
    write_prompt(p, args.out)
    return 0


def cmd_segment_fm(args):
    spec = BackendSpec.from_json(args.backend)
    query = read_any(args.query, "volume")
    prompt = read_prompt(args.prompt) if args.prompt else None
    gt = read_any(args.gt, "mask") if args.gt else None
    if gt is not None and args.label is not None:
        gt = gt.binary(args.label)
    out = segment(spec, query, prompt, gt=gt, context_label=args.label)
    write_any(out, args.out)
    return 0


def _prob(path, label=None):
    m = read_any(path, "auto")
    if isinstance(m, LabelMask):
        return ProbMask.from_mask(m.binary(label))
    if isinstance(m, ProbMask):
        return m
    return ProbMask.on(m.geometry, np.clip(m.data, 0.0, 1.0))


def cmd_fuse(args):
    a = _prob(args.atlas_mask, args.label)
    f = _prob(args.fm_mask)
    params = FusionParams.load(args.params)
    k = kalman_gain(a, f, params)
    soft = fuse(a, f, k)
    write_any(binarize(soft, args.threshold), args.out)
    if args.soft_out:
        write_any(soft, args.soft_out)
    if args.gain_out:
        write_any(k, args.gain_out)
    return 0


def _configs_from(path, seed):
    raw = load_toml(path) if path else {}
    if seed is not None:
        raw["seed"] = seed
    return case_config(raw)


def cmd_fit_fusion(args):
    cc = _configs_from(args.config, args.seed)
    fit = cc.fit
    if args.iters is not None:
        fit.iters = args.iters
    if args.lr is not None:
        fit.lr = args.lr
    if args.mode:
        fit.mode = args.mode
    img = read_any(args.support_img, "volume")
    mask = read_any(args.support_mask, "mask")
    if cc.normalize:
        img = normalize_intensity(img)
    backend = BackendSpec.from_json(args.backend)
    params, report = fit_fusion(img, mask, backend, cc.registration, FitConfig(**fit.to_dict()),
                                args.label, args.prompt_kind or None)
    params.save(args.out)
    if args.report:
        _dump_json({"selected": report["selected"], "candidates": report["candidates"],
                    "trace": report["trace"]}, args.report)
    return 0


def _timing(results, path):
    text = timing_table(results)
    sys.stdout.write(text)
    if path:
        with open(path, "w") as fh:
            fh.write(text)


def _case_overrides(args):
    return {
        "case.atlas_image": args.atlas, "case.atlas_mask": args.atlas_mask,
        "case.query_image": args.query, "case.query_gt": args.query_gt,
        "case.mode": args.mode, "seed": args.seed,
        "registration.enable_rigid": False if args.no_rigid else None,
        "registration.enable_affine": False if args.no_affine else None,
        "registration.enable_deform": False if args.no_deform else None,
    }


def _abs_paths(raw, base):
    case = raw.get("case", {})
    for k in ("atlas_image", "atlas_mask", "query_image", "query_gt", "fusion_params"):
        if case.get(k) and not os.path.isabs(case[k]):
            case[k] = os.path.join(base, case[k])
    gt = raw.get("backend", {}).get("oracle", {})
    if gt.get("gt_mask_path") and not os.path.isabs(gt["gt_mask_path"]):
        gt["gt_mask_path"] = os.path.join(base, gt["gt_mask_path"])


def cmd_run(args):
    raw = load_toml(args.config) if args.config else {}
    if args.config:
        _abs_paths(raw, os.path.dirname(os.path.abspath(args.config)))
    apply_overrides(raw, _case_overrides(args))
    cfg = case_config(raw)
    res = run_case(cfg, case_id=args.case_id)
    os.makedirs(args.out, exist_ok=True)
    write_resolved(cfg, os.path.join(args.out, "resolved_config.toml"))
    write_case_outputs(res, args.out)
    emit_report([res], args.out, args.format)
    _timing([res], args.timing)
    if res.error:
        print(f"case {res.case_id} failed: {res.error}", file=sys.stderr)
        return 1
    return 0


def cmd_crossval(args):
    raw = load_toml(args.config) if args.config else {}
    apply_overrides(raw, {"seed": args.seed})
    cfg = case_config(raw)
    manifest = read_manifest(args.manifest)
    folds, results = run_crossval(manifest, cfg, args.folds)
    os.makedirs(args.out, exist_ok=True)
    write_resolved(cfg, os.path.join(args.out, "resolved_config.toml"),
                   {"crossval": {"folds": args.folds}})
    emit_report(results, args.out, args.format, folds=folds)
    _timing(results, args.timing)
    failed = [r for r in results if r.error]
    for r in failed:
        print(f"case {r.case_id} failed: {r.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_eval(args):
    pred = read_any(args.pred, "mask")
    gt = read_any(args.gt, "mask")
    rep = evaluate(pred, gt, args.labels or None, args.tol_mm, args.hd95, not args.no_cl_dice)
    d = rep.to_dict()
    if args.out.endswith(".csv"):
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["context", "dice", "nsd", "hd95", "cl_dice", "tolerance_mm", "hd95_convention"])
            for lab, m in d["per_context"].items():
                w.writerow([lab] + [f"{m[k]:.6f}" for k in ("dice", "nsd", "hd95", "cl_dice")]
                           + [rep.tolerance_mm, rep.hd95_convention])
            w.writerow(["mean"] + [f"{d[k]:.6f}" for k in ("dice", "nsd", "hd95", "cl_dice")]
                       + [rep.tolerance_mm, rep.hd95_convention])
    else:
        _dump_json(_json_safe(d), args.out)
    return 0


def _json_safe(x):
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_json_safe(v) for v in x]
    if isinstance(x, float) and x != x:
        return None
    return x


def _reg_flags(p):
    p.add_argument("--no-rigid", action="store_true")
    p.add_argument("--no-affine", action="store_true")
    p.add_argument("--no-deform", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="atlasfuse", description=__doc__)
    ap.add_argument("--version", action="version", version=f"atlasfuse {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic atlas/query pair or a case collection")
    p.add_argument("--kind", choices=KINDS, default="two-organ")
    p.add_argument("--dims", type=int, nargs="+", default=[64])
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--max-disp", type=float, default=8.0, help="max displacement, voxels")
    p.add_argument("--sigma", type=float, default=8.0, help="field smoothing, voxels")
    p.add_argument("--deform-seed", type=int, default=0)
    p.add_argument("--rot", type=float, nargs=3, default=[0.0, 0.0, 0.0], help="degrees")
    p.add_argument("--shift", type=float, nargs=3, default=[0.0, 0.0, 0.0], help="voxels")
    p.add_argument("--scale", type=float, nargs=3, default=[1.0, 1.0, 1.0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=0, help="write N warped cases and manifest.json instead")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("register", help="align an atlas to a query")
    p.add_argument("--atlas", required=True)
    p.add_argument("--atlas-mask", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--out", required=True)
    _reg_flags(p)
    p.add_argument("--lambda", dest="reg_lambda", type=float)
    p.add_argument("--iters", type=int, help="deformable iterations per level")
    p.add_argument("--loss", choices=("mse", "ncc"))
    p.add_argument("--seed", type=int, default=0, help="recorded; registration itself draws no randomness")
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("prompt", help="derive a prompt from a mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--kind", choices=PROMPT_KINDS, required=True)
    p.add_argument("--label", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("segment-fm", help="run a segmentation backend")
    p.add_argument("--backend", required=True, help="backend spec JSON")
    p.add_argument("--query", required=True)
    p.add_argument("--prompt")
    p.add_argument("--gt", help="ground truth for the oracle backend")
    p.add_argument("--label", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment_fm)

    p = sub.add_parser("fuse", help="fuse atlas and backend masks with given gate parameters")
    p.add_argument("--atlas-mask", required=True)
    p.add_argument("--fm-mask", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--label", type=int)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--soft-out")
    p.add_argument("--gain-out")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("fit-fusion", help="fit gate parameters on a support pair")
    p.add_argument("--support-img", required=True)
    p.add_argument("--support-mask", required=True)
    p.add_argument("--backend", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="TOML with [registration] and [fit] tables")
    p.add_argument("--label", type=int)
    p.add_argument("--prompt-kind", choices=PROMPT_KINDS + ("none",))
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mode", choices=("augment", "self"))
    p.add_argument("--seed", type=int)
    p.add_argument("--report", help="also write the fitting report (JSON)")
    p.set_defaults(func=cmd_fit_fusion)

    for name, fn, hlp in (("run", cmd_run, "full pipeline on one case"),
                          ("crossval", cmd_crossval, "cross-validated evaluation over a manifest")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--format", choices=("csv", "json", "both"), default="both")
        p.add_argument("--timing", help="also write the stage timing table here (never inside --out)")
        p.set_defaults(func=fn)
        if name == "run":
            p.add_argument("--atlas")
            p.add_argument("--atlas-mask")
            p.add_argument("--query")
            p.add_argument("--query-gt")
            p.add_argument("--case-id", default="case")
            p.add_argument("--mode", choices=("full", "atlas_only", "fm_only"))
            _reg_flags(p)
        else:
            p.add_argument("--manifest", required=True)
            p.add_argument("--folds", type=int, default=5)

    p = sub.add_parser("eval", help="score a prediction against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--tol-mm", type=float, default=1.0)
    p.add_argument("--hd95", choices=("pooled", "max"), default="pooled")
    p.add_argument("--labels", type=int, nargs="*")
    p.add_argument("--no-cl-dice", action="store_true")
    p.add_argument("--out", required=True, help="report.json or report.csv")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _USER_ERRORS as exc:
        print(f"atlasfuse {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
