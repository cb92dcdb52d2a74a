"""``vlk`` command line: one subcommand per pipeline stage plus ``pipeline``.

Machine-readable output is JSON on stdout; human summaries go to stderr.
Exit status: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .labeling import assign_voxel_labels
from .metrics import evaluate_labels
from .phantom import PhantomError, PhantomSpec, default_cow_spec, generate_phantom, load_centerlines, save_centerlines
from .predictor import NoisyOraclePredictor, OraclePredictor, PredictorError, SubprocessPredictor
from .preprocess import extract_patches, fixed_size_input, plan_patches
from .stats import (EmptyRegionError, agreement, downsample2_field, downsample2_labels, region_mean,
                    scatter_points)
from .transforms import (apply_forward, invert_coordinate_guided, invert_standard, misassigned_fraction,
                         sample_tta_transform)
from .uncertainty import TTAError, consensus_and_uncertainty, normalize_mode, run_tta
from .volume import CLASS_NAMES, VESSEL_LABELS, Volume, VolumeError, read_volume, write_volume

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _log(msg):
    print(msg, file=sys.stderr)


def _emit(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    print(text)


def _environment():
    return {"vlk": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _config(args):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    return {"command": args.command, "args": cfg, "versions": _environment()}


def _dims(values):
    if len(values) == 1:
        return (values[0],) * 3
    if len(values) == 3:
        return tuple(values)
    raise UsageError("--dims takes one or three integers")


def _stats(a):
    a = np.asarray(a, dtype=float)
    return {"mean": float(a.mean()), "std": float(a.std(ddof=1)) if len(a) > 1 else 0.0,
            "median": float(np.median(a)), "min": float(a.min()), "max": float(a.max())}


# -- subcommands ------------------------------------------------------------

def cmd_phantom(args):
    if args.spec:
        spec = PhantomSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    else:
        spec = default_cow_spec(_dims(args.dims), args.seed, tuple(args.spacing))
    seg, cl, vel = generate_phantom(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(seg, out / "seg")
    write_volume(vel, out / "velocity")
    save_centerlines(cl, out / "centerlines.json")
    (out / "phantom_spec.json").write_text(json.dumps(spec.to_dict(), indent=2), encoding="utf-8")
    _log(f"phantom {seg.dims}: {int(seg.data.sum())} vessel voxels, {len(cl)} centerlines -> {out}")
    _emit({"config": _config(args), "outputs": {
        "seg": str(out / "seg"), "velocity": str(out / "velocity"),
        "centerlines": str(out / "centerlines.json"), "spec": str(out / "phantom_spec.json")},
        "foreground_voxels": int(seg.data.sum())})


def cmd_make_labels(args):
    seg = read_volume(args.seg)
    labels = assign_voxel_labels(seg, load_centerlines(args.centerlines), args.neighborhood)
    write_volume(labels, args.out)
    counts = np.bincount(labels.data.ravel(), minlength=len(CLASS_NAMES))
    _log(f"labels written to {args.out}; non-annotated voxels: {int(counts[10])}")
    _emit({"config": _config(args), "class_counts": {CLASS_NAMES[c]: int(n) for c, n in enumerate(counts)}})


def cmd_preprocess(args):
    vol = read_volume(args.inp)
    if args.mode == "fixed":
        if not args.out:
            raise UsageError("--mode fixed needs --out")
        res = fixed_size_input(vol, tuple(args.target), args.margin)
        write_volume(res, args.out)
        _emit({"config": _config(args), "output": args.out, "dims": list(res.dims), "spacing": list(res.spacing)})
        return
    if not args.out_dir:
        raise UsageError("--mode patches needs --out-dir")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = plan_patches(vol.dims, tuple(args.patch), args.step, args.weights)
    (out / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2), encoding="utf-8")
    names = []
    for i, (_, patch) in enumerate(extract_patches(vol, plan)):
        name = f"patch_{i:03d}"
        write_volume(patch, out / name)
        names.append(name)
    _log(f"{len(names)} patches of {plan.patch_dims} -> {out}")
    _emit({"config": _config(args), "plan": plan.to_dict(), "patches": names})


def _make_predictor(args):
    if args.predictor in ("oracle", "noisy-oracle"):
        if not args.centerlines:
            raise UsageError(f"--predictor {args.predictor} needs --centerlines")
        cl = load_centerlines(args.centerlines)
        if args.predictor == "oracle":
            return OraclePredictor(cl)
        return NoisyOraclePredictor(cl, args.flip_rate, args.seed)
    return SubprocessPredictor(args.predictor)


def cmd_tta(args):
    seg = read_volume(args.seg)
    predictor = _make_predictor(args)
    stack = run_tta(seg, predictor, args.k, args.seed, normalize_mode(args.mode))
    labels, unc = consensus_and_uncertainty(stack)
    write_volume(labels, args.out_labels)
    write_volume(unc, args.out_uncertainty)
    fg = seg.data != 0
    _log(f"TTA K={args.k} ({stack.mode}); mean foreground uncertainty {float(unc.data[fg].mean()) if fg.any() else 0:.4f}")
    _emit({"config": _config(args), "transforms": [t.to_dict() for t in stack.transforms],
           "mean_foreground_uncertainty": float(unc.data[fg].mean()) if fg.any() else 0.0})


def _eval_report(pred, gt, per_class=True):
    ev = evaluate_labels(pred, gt)
    rep = {"mean_dice_vessels": ev["mean_dice_vessels"], "mean_asd_mm_vessels": ev["mean_asd_mm_vessels"],
           "vessels_evaluated": [CLASS_NAMES[c] for c in ev["vessels_evaluated"]]}
    if per_class:
        rep["dice"] = {CLASS_NAMES[c]: v for c, v in ev["dice"].items()}
        rep["asd_mm"] = {CLASS_NAMES[c]: v for c, v in ev["asd_mm"].items()}
    return rep


def cmd_eval(args):
    pred, gt = read_volume(args.pred), read_volume(args.gt)
    if pred.dims != gt.dims:
        raise VolumeError(f"shape mismatch: prediction {pred.dims} vs ground truth {gt.dims}")
    rep = _eval_report(pred, gt, args.per_class)
    _log(f"mean Dice (vessels): {rep['mean_dice_vessels']}; mean ASD (mm): {rep['mean_asd_mm_vessels']}")
    _emit({"config": _config(args), **rep})


def inversion_trials(labels: Volume, seg: Volume, n: int, seed: int, search_radius: int = 2) -> dict:
    """Round-trip ``labels`` through n random transforms with both inversions."""
    std, cg = [], []
    for i in range(n):
        t = sample_tta_transform(seed, i)
        moved = apply_forward(labels, t)
        std.append(misassigned_fraction(labels, invert_standard(moved, t)))
        cg.append(misassigned_fraction(labels, invert_coordinate_guided(moved, t, seg, search_radius)))
    std, cg = np.asarray(std), np.asarray(cg)
    return {
        "n": n,
        "per_trial": {"standard": std.tolist(), "coordinate_guided": cg.tolist()},
        "standard": _stats(std),
        "coordinate_guided": _stats(cg),
        "coordinate_guided_better": int(np.sum(cg < std)),
    }


def cmd_inversion_trials(args):
    seg, labels = read_volume(args.seg), read_volume(args.labels)
    if seg.dims != labels.dims:
        raise VolumeError(f"shape mismatch: segmentation {seg.dims} vs labels {labels.dims}")
    rep = inversion_trials(labels, seg, args.n, args.seed, args.search_radius)
    _log(f"misassigned: standard {100 * rep['standard']['mean']:.2f}% vs coordinate-guided "
         f"{100 * rep['coordinate_guided']['mean']:.3f}% ({rep['coordinate_guided_better']}/{args.n} better)")
    _emit({"config": _config(args), **rep})


def read_pairs_csv(path):
    groups = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"vessel", "manual", "auto"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: CSV lacks columns {sorted(missing)}")
        for row in reader:
            groups[row["vessel"]].append((float(row["manual"]), float(row["auto"])))
    return groups


def agreement_table(groups, percent=False, normalize="pair"):
    table = {}
    for vessel, pairs in groups.items():
        native = agreement(pairs)
        row = {"native": native.to_dict()}
        if percent:
            row["percent"] = agreement(pairs, True, normalize).to_dict()
        table[vessel] = row
    return table


def cmd_agree(args):
    groups = read_pairs_csv(args.pairs)
    table = agreement_table(groups, args.percent, args.normalize)
    if args.scatter:
        with open(args.scatter, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["vessel", "mean", "difference"])
            for vessel, pairs in groups.items():
                for m, d in scatter_points(pairs, args.percent, args.normalize):
                    w.writerow([vessel, repr(float(m)), repr(float(d))])
    for vessel, row in table.items():
        r = row["native"]
        _log(f"{vessel}: n={r['n']} mean|d|={r['mean_abs_diff']:.3f} LoA width={r['loa_width']:.3f} p={r['wilcoxon_p']:.3f}")
    _emit({"config": _config(args), "agreement": table})


def run_pipeline(dims, seed, k=7, mode="coordinate_guided", predictor="oracle", flip_rate=0.1, out_dir=None):
    spec = default_cow_spec(dims, seed)
    seg, cl, vel = generate_phantom(spec)
    gt = assign_voxel_labels(seg, cl)
    if predictor == "oracle":
        model = OraclePredictor(cl)
    elif predictor == "noisy-oracle":
        model = NoisyOraclePredictor(cl, flip_rate, seed)
    else:
        model = SubprocessPredictor(predictor)
    stack = run_tta(seg, model, k, seed, mode)
    labels, unc = consensus_and_uncertainty(stack)

    per_layer = [misassigned_fraction(gt, stack.layer(i)) for i in range(stack.k)]
    evaluation = _eval_report(labels, gt)

    gt_ds, auto_ds, vel_ds = downsample2_labels(gt), downsample2_labels(labels), downsample2_field(vel)
    rows, pairs = {}, []
    for c in VESSEL_LABELS:
        try:
            manual = region_mean(vel_ds, gt_ds, c)
        except EmptyRegionError:
            continue
        try:
            auto = region_mean(vel_ds, auto_ds, c)
        except EmptyRegionError:
            auto = float("nan")
        rows[CLASS_NAMES[c]] = {"manual": manual, "auto": auto,
                                "relative_difference": (auto - manual) / manual if manual else None}
        if np.isfinite(auto):
            pairs.append((manual, auto))
    pooled = agreement(pairs).to_dict() if len(pairs) >= 2 else None
    pooled_pct = agreement(pairs, True).to_dict() if len(pairs) >= 2 else None

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_volume(seg, out / "seg")
        write_volume(vel, out / "velocity")
        save_centerlines(cl, out / "centerlines.json")
        write_volume(gt, out / "labels_gt")
        write_volume(labels, out / "labels_tta")
        write_volume(unc, out / "uncertainty")

    fg = seg.data != 0
    return {
        "phantom": {"dims": list(seg.dims), "spacing": list(seg.spacing), "foreground_voxels": int(fg.sum())},
        "tta": {
            "k": stack.k, "mode": stack.mode,
            "transforms": [t.to_dict() for t in stack.transforms],
            "per_trial_misassigned_fraction": per_layer,
            "consensus_misassigned_fraction": misassigned_fraction(gt, labels),
            "mean_foreground_uncertainty": float(unc.data[fg].mean()),
        },
        "evaluation": evaluation,
        "velocity": {"per_vessel": rows, "agreement": pooled, "agreement_percent": pooled_pct},
    }


def cmd_pipeline(args):
    t0 = time.perf_counter()
    rep = run_pipeline(_dims(args.dims), args.seed, args.k, normalize_mode(args.mode), args.predictor,
                       args.flip_rate, args.out_dir)
    ev = rep["evaluation"]
    _log(f"pipeline done in {time.perf_counter() - t0:.1f}s: mean Dice {ev['mean_dice_vessels']:.4f}, "
         f"mean ASD {ev['mean_asd_mm_vessels']:.4f} mm")
    _emit({"config": _config(args), **rep}, args.report)


# -- parser -----------------------------------------------------------------

def build_parser():
    p = _Parser(prog="vlk", description="Intracranial artery labeling toolkit")
    p.add_argument("--version", action="version", version=f"vlk {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate a synthetic vascular phantom")
    s.add_argument("--dims", type=int, nargs="+", default=[96])
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--spacing", type=float, nargs=3, default=[0.5, 0.5, 0.5])
    s.add_argument("--spec", help="PhantomSpec JSON instead of the default layout")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("make-labels", help="voxel labels from labeled centerlines")
    s.add_argument("--seg", required=True)
    s.add_argument("--centerlines", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--neighborhood", type=int, default=7)
    s.set_defaults(func=cmd_make_labels)

    s = sub.add_parser("preprocess", help="fixed-size or patch preprocessing")
    s.add_argument("--mode", choices=["fixed", "patches"], required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out")
    s.add_argument("--out-dir")
    s.add_argument("--target", type=int, nargs=3, default=[128, 256, 256])
    s.add_argument("--margin", type=float, default=0.15)
    s.add_argument("--patch", type=int, nargs=3, default=[80, 224, 160])
    s.add_argument("--step", type=float, default=0.5)
    s.add_argument("--weights", choices=["uniform", "gaussian"], default="uniform")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("tta", help="test-time augmentation with uncertainty")
    s.add_argument("--seg", required=True)
    s.add_argument("--predictor", required=True, help="oracle, noisy-oracle, or a command with {in} and {out}")
    s.add_argument("--centerlines")
    s.add_argument("--flip-rate", type=float, default=0.1)
    s.add_argument("--k", type=int, default=7)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--mode", choices=["standard", "coordinate-guided", "coordinate_guided"], default="coordinate-guided")
    s.add_argument("--out-labels", required=True)
    s.add_argument("--out-uncertainty", required=True)
    s.set_defaults(func=cmd_tta)

    s = sub.add_parser("eval", help="Dice and ASD of a label map against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--per-class", action="store_true")
    s.add_argument("--json", action="store_true", help="accepted for symmetry; output is always JSON")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("appendix-a", help="standard vs coordinate-guided inversion over random transforms")
    s.add_argument("--seg", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--search-radius", type=int, default=2)
    s.set_defaults(func=cmd_inversion_trials)

    s = sub.add_parser("agree", help="Bland-Altman and Wilcoxon per vessel from a CSV of pairs")
    s.add_argument("--pairs", required=True, help="CSV with columns vessel,manual,auto")
    s.add_argument("--percent", action="store_true")
    s.add_argument("--normalize", choices=["pair", "grand"], default="pair")
    s.add_argument("--scatter", help="write Bland-Altman scatter data (CSV)")
    s.add_argument("--json", action="store_true", help="accepted for symmetry; output is always JSON")
    s.set_defaults(func=cmd_agree)

    s = sub.add_parser("pipeline", help="phantom -> labels -> TTA -> eval -> velocity agreement")
    s.add_argument("--dims", type=int, nargs="+", default=[96])
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--k", type=int, default=7)
    s.add_argument("--mode", choices=["standard", "coordinate-guided", "coordinate_guided"], default="coordinate-guided")
    s.add_argument("--predictor", default="oracle")
    s.add_argument("--flip-rate", type=float, default=0.1)
    s.add_argument("--out-dir")
    s.add_argument("--report", help="also write the JSON report here")
    s.set_defaults(func=cmd_pipeline)
    return p


DATA_ERRORS = (VolumeError, PhantomError, PredictorError, TTAError, ValueError, OSError, json.JSONDecodeError)


def run(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        args.func(args)
    except UsageError as exc:
        _log(str(exc))
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        _log(f"error: {exc}")
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
