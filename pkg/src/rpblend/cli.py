"""Command line entry point: ``rpblend <command> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import RPBError
from .imaging import Mask, bbox_of_mask, composite, crop, load_image, load_mask, paste, save_image
from .kernels import read_fixture, run_kernel_checks
from .metrics import EVAL_SIZE, eval_protocol
from .pipeline import (
    KEEP,
    SHORTLIST,
    ScorerHandle,
    SynthesisOptions,
    dataset_stats,
    filter_manifest,
    list_images,
    read_manifest,
    synthesize_dataset,
    write_manifest,
)
from .poisson import CONJUGATE_GRADIENT, DENSE_DIRECT, SolverConfig, seamless_clone
from .synthesis import mix_foregrounds

log = logging.getLogger("rpblend")


def _offset(text):
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected R,C got {text!r}") from None
    return r, c


def _solver_args(p):
    p.add_argument("--solver", choices=[CONJUGATE_GRADIENT, DENSE_DIRECT], default=CONJUGATE_GRADIENT)
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--max-iterations", type=int, default=None)


def _solver(args) -> SolverConfig:
    return SolverConfig(args.solver, args.max_iterations, args.tolerance)


def cmd_blend(args):
    src = load_image(args.src)
    dst = load_image(args.dst)
    if src.channels != dst.channels:
        src, dst = src.to_rgb(), dst.to_rgb()
    mask = load_mask(args.mask, args.threshold)
    res = seamless_clone(src, dst, mask, args.offset, _solver(args))
    out = res.image
    if args.alpha != 1.0:
        # mix inside the translated mask: alpha * cloned + (1 - alpha) * source
        box = bbox_of_mask(mask)
        target = box.shifted(*args.offset)
        mixed = mix_foregrounds(crop(out, target), crop(src, box), args.alpha)
        placed = np.zeros(dst.shape[:2], dtype=bool)
        placed[target.slices] = mask.data[box.slices]
        out = composite(paste(out, mixed, target), dst, Mask(placed))
    save_image(out, args.out)
    if not res.converged:
        log.warning("solver did not converge (residual %.3e)", res.residual)
    print(f"wrote {args.out} (iterations={res.iterations}, residual={res.residual:.2e})")
    return 0


def cmd_synthesize(args):
    opts = SynthesisOptions(
        candidates=args.candidates, alpha_min=args.alpha_min, alpha_max=args.alpha_max,
        seed=args.seed, threads=args.threads, ratio_lo=args.ratio_min, ratio_hi=args.ratio_max,
        solver=_solver(args),
    )
    entries = synthesize_dataset(args.reals, args.masks, args.refs, args.out, opts)
    print(f"wrote {len(entries)} candidates to {Path(args.out) / 'manifest.jsonl'}")
    return 0


def cmd_filter(args):
    entries = read_manifest(args.manifest)
    scorer = ScorerHandle.from_file(args.scores) if args.scores else ScorerHandle()
    out = filter_manifest(entries, scorer, args.keep, args.shortlist)
    dest = args.out or args.manifest
    write_manifest(out, dest)
    kept = sum(not e.rejected for e in out)
    print(f"kept {kept} of {len(out)} entries -> {dest}")
    return 0


def cmd_stats(args):
    manifest = Path(args.manifest)
    report = dataset_stats(read_manifest(manifest), base_dir=manifest.parent)
    out = Path(args.out)
    report.to_csv(out)
    text = report.to_text()
    out.with_suffix(".txt").write_text(text, encoding="utf-8")
    if not args.no_figure:
        from .plotting import plot_ratio_histogram

        plot_ratio_histogram(report.bin_edges, report.counts, out.with_suffix(".png"))
    sys.stdout.write(text)
    return 0


def cmd_eval(args):
    preds = {p.stem: p for p in list_images(args.pred)}
    gts = {p.stem: p for p in list_images(args.gt)}
    masks = {p.stem: p for p in list_images(args.mask)}
    names = sorted(set(preds) & set(gts) & set(masks))
    if not names:
        log.error("no file stems shared by --pred, --gt and --mask")
        return 1
    for missing in sorted(set(preds) - set(names)):
        log.warning("skipping %s: no matching ground truth or mask", missing)
    rows = []
    for name in names:
        pred, gt = load_image(preds[name]), load_image(gts[name])
        if pred.channels != gt.channels:
            pred, gt = pred.to_rgb(), gt.to_rgb()
        rec = eval_protocol(pred, gt, load_mask(masks[name]), args.resize or None, args.filter)
        rows.append((name, rec.psnr, rec.mse, rec.fmse, rec.ssim))
    out = Path(args.out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "psnr", "mse", "fmse", "ssim"])
        for row in rows:
            w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
        means = np.array([r[1:] for r in rows]).mean(axis=0)
        w.writerow(["mean"] + [f"{v:.6f}" for v in means])
    if not args.no_figure:
        from .plotting import plot_metric_summary

        plot_metric_summary(names, [r[1] for r in rows], [r[3] for r in rows], out.with_suffix(".png"))
    print(f"mean over {len(rows)} images: PSNR {means[0]:.2f} MSE {means[1]:.2f} "
          f"fMSE {means[2]:.2f} SSIM {means[3]:.4f}")
    return 0


def cmd_maca_check(args):
    fixture = read_fixture(args.fixture)
    results = run_kernel_checks(fixture)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rpblend", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("blend", help="seamlessly clone a masked source into a destination")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--offset", type=_offset, default=(0, 0), help="R,C shift from source to destination")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    _solver_args(p)
    p.set_defaults(func=cmd_blend)

    p = sub.add_parser("synthesize", help="generate candidate composites and a manifest")
    p.add_argument("--reals", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--candidates", type=int, default=5)
    p.add_argument("--alpha-min", type=float, default=0.6)
    p.add_argument("--alpha-max", type=float, default=1.0)
    p.add_argument("--ratio-min", type=float, default=0.01)
    p.add_argument("--ratio-max", type=float, default=0.80)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    _solver_args(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("filter", help="rank candidates and mark rejected entries")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scores", help="CSV of composite_path,score; heuristic scores if omitted")
    p.add_argument("--keep", type=int, default=KEEP)
    p.add_argument("--shortlist", type=int, default=SHORTLIST)
    p.add_argument("--out", help="output manifest (default: overwrite --manifest)")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("stats", help="foreground-ratio histogram and tallies")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("eval", help="PSNR / MSE / fMSE / SSIM over a prediction directory")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--resize", type=int, default=EVAL_SIZE, help="0 keeps native size")
    p.add_argument("--filter", choices=["bilinear", "nearest"], default="bilinear")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("maca-check", help="run kernel invariants on a fixture file")
    p.add_argument("--fixture", required=True)
    p.set_defaults(func=cmd_maca_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RPBError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
