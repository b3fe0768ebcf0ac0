"""Command-line front door wiring the library into one workflow.

Subcommands: validate, stats, merge, train, evaluate, grid-search, gradcheck.
Exit codes: 0 success, 1 validation failure, 2 usage error, 3 runtime error.
Report files never contain timestamps, so identical invocations on identical
inputs produce byte-identical reports; report-producing commands also render a
matplotlib figure next to each delimited output unless --no-figures is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import numpy as np

from . import __version__
from .datasets import (
    ManifestError, SPLITS, binarize_labels, cooccurrence_stats, label_distribution,
    load_manifest, merge, save_manifest, validate_speaker_exclusivity,
)
from .gradcheck import run_suite
from .ioutil import atomic_write_text
from .losses import LossConfig
from .metrics import evaluate, report_json_text, report_tsv
from .training import (
    DEFAULT_GRID, TrainConfig, grid_search, load_checkpoint, save_checkpoint,
    train, warm_start,
)

logger = logging.getLogger("dysflux")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3

GRADCHECK_TOLERANCE = 1e-4


def _parse_grid(text):
    """'w1,w2;a1,a2;g1,g2' -> grid dict; malformed specs are usage errors."""
    try:
        parts = text.split(";")
        if len(parts) != 3:
            raise ValueError("expected three ';'-separated lists")
        w, a, g = (sorted(float(x) for x in part.split(",") if x.strip()) for part in parts)
        if not (w and a and g):
            raise ValueError("every list needs at least one value")
        return {"w_main": w, "alpha": a, "gamma": g}
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad grid spec {text!r}: {exc}") from None


def _add_train_flags(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=3e-5, help="learning rate (default 3e-5)")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--max-epochs", type=int, default=20)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--w-main", type=float, default=0.9)
    p.add_argument("--alpha", type=float, default=0.7)
    p.add_argument("--gamma", type=float, default=3.0)
    p.add_argument("--aux-task", choices=["any", "gender"], default="any")
    p.add_argument("--class-set", choices=["six", "seven"], default="seven")
    p.add_argument("--monitor", choices=["total", "main"], default="total")
    p.add_argument("--main-loss", choices=["focal", "weighted_bce"], default="focal")
    p.add_argument("--class-weights", choices=["uniform", "inverse-frequency"],
                   default="uniform", help="weighted_bce class weighting")
    p.add_argument("--no-projections", action="store_true",
                   help="ablation: pool the raw weighted layer sum without Q/K/V projections")
    p.add_argument("--mask-english-mod", action="store_true",
                   help="exclude the Mod class from the loss on English clips instead of "
                        "treating them as hard negatives")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dysflux",
        description="Multi-label dysfluency detection toolkit",
    )
    parser.add_argument("--version", action="version", version=f"dysflux {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check manifest invariants and speaker exclusivity")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="write the validation report to this file")

    p = sub.add_parser("stats", help="label distribution and co-occurrence report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=list(SPLITS))
    p.add_argument("--binarize-threshold", type=int,
                   help="recompute labels from annotator counts with this threshold")
    p.add_argument("--out", help="directory for stats.tsv (+ stats.png)")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("merge", help="combine manifests into one")
    p.add_argument("--manifest", action="append", required=True,
                   help="repeat once per source manifest")
    p.add_argument("--name", default="merged")
    p.add_argument("--out", required=True, help="path of the merged manifest")

    p = sub.add_parser("train", help="train the classification head")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features-dir", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--warm-start", help="checkpoint directory to transfer weights from")
    p.add_argument("--no-figures", action="store_true")
    _add_train_flags(p)

    p = sub.add_parser("evaluate", help="per-class precision/recall/F1 report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features-dir", required=True)
    p.add_argument("--split", choices=list(SPLITS), default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="directory for report.tsv/report.json (+ f1.png)")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("grid-search", help="train one model per (w_main, alpha, gamma) cell")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features-dir", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--grid", type=_parse_grid,
                   help="'<w list>;<alpha list>;<gamma list>', e.g. '0.5,0.9;0.1,0.7;1,3' "
                        "(default: full standard grid, 135 cells)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-figures", action="store_true")
    _add_train_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the head+loss composition")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--out", help="write the per-case report to this file")
    return parser


def _train_config(args, manifest=None):
    class_weights = None
    if args.class_weights == "inverse-frequency":
        if manifest is None:
            raise ValueError("inverse-frequency weights require a manifest")
        class_weights = _inverse_frequency_weights(manifest, args.class_set)
    loss = LossConfig(
        alpha=args.alpha,
        gamma=args.gamma,
        w_main=args.w_main,
        main_loss_kind=args.main_loss,
        class_weights=class_weights,
    )
    return TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
        weight_decay=args.weight_decay,
        loss=loss,
        aux_task=args.aux_task,
        class_set=args.class_set,
        seed=args.seed,
        monitor={"total": "total_dev_loss", "main": "main_dev_loss"}[args.monitor],
        use_projections=not args.no_projections,
        mask_english_mod=args.mask_english_mod,
    )


def _inverse_frequency_weights(manifest, class_set_name):
    from .datasets import resolve_class_set
    class_set = resolve_class_set(class_set_name)
    records = manifest.split_records("train")
    if not records:
        raise ValueError("inverse-frequency weights need a non-empty train split")
    counts = np.array(
        [sum(r.label(name) for r in records) for name in class_set], dtype=np.float64
    )
    raw = len(records) / (counts + 1.0)  # +1 keeps zero-support classes finite
    return raw / raw.mean()


def _meta_lines(binarization="as-loaded", seed="-", threshold="-"):
    return [
        f"# toolkit_version\t{__version__}",
        f"# seed\t{seed}",
        f"# threshold\t{threshold}",
        f"# binarization\t{binarization}",
    ]


def cmd_validate(args):
    try:
        manifest = load_manifest(args.manifest)
    except ManifestError as exc:
        lines = ["manifest invariants: FAIL", *(f"  {v}" for v in exc.violations)]
        text = "\n".join(lines) + "\n"
        print(text, end="")
        if args.out:
            atomic_write_text(args.out, text)
        return EXIT_VALIDATION
    report = validate_speaker_exclusivity(manifest)
    lines = [f"manifest invariants: PASS ({len(manifest)} records)", *report.lines()]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        atomic_write_text(args.out, text)
    return EXIT_OK if report.ok else EXIT_VALIDATION


def _rebinarized(manifest, threshold):
    if manifest.n_annotators is None:
        raise ValueError("manifest header lacks n_annotators; cannot re-binarize")
    for r in manifest.records:
        if r.annotator_counts is not None:
            r.labels = binarize_labels(r.annotator_counts, manifest.n_annotators, threshold)
    return manifest


def cmd_stats(args):
    manifest = load_manifest(args.manifest)
    binarization = "as-loaded"
    if args.binarize_threshold is not None:
        manifest = _rebinarized(manifest, args.binarize_threshold)
        binarization = f">={args.binarize_threshold} of {manifest.n_annotators}"

    selections = [args.split] if args.split else [None, *SPLITS]
    reports = [label_distribution(manifest, split=s) for s in selections]
    reports = [r for r in reports if not r.empty]
    if not reports:
        raise ValueError("manifest has no records in the requested selection")

    lines = _meta_lines(binarization=binarization)
    lines.append(f"# manifest\t{manifest.name}")
    header = ["class"] + [(r.split or "all") for r in reports]
    lines.append("\t".join(header))
    for name in manifest.class_set:
        lines.append("\t".join([name] + [f"{r.percentages[name]:.1f}" for r in reports]))
    lines.append("\t".join(["total"] + [str(r.total) for r in reports]))
    cooc = ["cooccurrence_pct"] + [
        f"{100.0 * cooccurrence_stats(manifest, split=r.split):.1f}" for r in reports
    ]
    lines.append("\t".join(cooc))
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        atomic_write_text(os.path.join(args.out, "stats.tsv"), text)
        if not args.no_figures:
            from .figures import save_distribution_figure
            save_distribution_figure(reports, os.path.join(args.out, "stats.png"))
    return EXIT_OK


def cmd_merge(args):
    manifests = [load_manifest(path) for path in args.manifest]
    merged = merge(manifests, args.name)
    save_manifest(merged, args.out)
    sources = ", ".join(f"{m.name}({len(m)})" for m in manifests)
    print(f"merged {sources} -> {merged.name}: {len(merged)} records, "
          f"{len(merged.class_set)} classes")
    return EXIT_OK


def _history_tsv(checkpoint):
    lines = _meta_lines(seed=checkpoint.config.seed)
    cols = ("epoch", "train_main", "train_aux", "train_total",
            "dev_main", "dev_aux", "dev_total")
    lines.append("\t".join(cols))
    for h in checkpoint.history:
        lines.append("\t".join(
            str(h["epoch"]) if c == "epoch" else f"{h[c]:.12g}" for c in cols
        ))
    lines.append(f"# best_epoch\t{checkpoint.best_epoch}")
    return "\n".join(lines) + "\n"


def cmd_train(args):
    manifest = load_manifest(args.manifest)
    config = _train_config(args, manifest)
    logger.info("training configuration: %s", json.dumps(config.to_dict(), sort_keys=True))
    initial = None
    lineage = None
    if args.warm_start:
        source = load_checkpoint(args.warm_start)
        initial = warm_start(source, config)
        lineage = os.path.abspath(args.warm_start)
    checkpoint = train(config, manifest, args.features_dir,
                       initial_params=initial, warm_start_from=lineage)
    save_checkpoint(checkpoint, args.out)
    atomic_write_text(os.path.join(args.out, "history.tsv"), _history_tsv(checkpoint))
    if not args.no_figures:
        from .figures import save_history_figure
        save_history_figure(checkpoint.history, os.path.join(args.out, "history.png"))
    best = checkpoint.history[checkpoint.best_epoch - 1]
    print(f"trained {len(checkpoint.history)} epochs; best epoch {checkpoint.best_epoch} "
          f"(dev total {best['dev_total']:.6f}, dev main {best['dev_main']:.6f})")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_evaluate(args):
    checkpoint = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    report = evaluate(checkpoint, manifest, args.split, args.features_dir,
                      threshold=args.threshold)
    tsv = report_tsv(report)
    print(tsv, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        atomic_write_text(os.path.join(args.out, "report.tsv"), tsv)
        atomic_write_text(os.path.join(args.out, "report.json"), report_json_text(report))
        if not args.no_figures:
            from .figures import save_f1_figure
            save_f1_figure(report, os.path.join(args.out, "f1.png"))
    return EXIT_OK


def cmd_grid_search(args):
    manifest = load_manifest(args.manifest)
    base = _train_config(args, manifest)
    grid = args.grid or DEFAULT_GRID
    result = grid_search(base, manifest, args.features_dir, grid=grid, jobs=args.jobs)
    lines = _meta_lines(seed=base.seed)
    lines.append("rank\tw_main\talpha\tgamma\tdev_loss\tbest_epoch")
    for rank, cell in enumerate(result.ranked, start=1):
        lines.append(f"{rank}\t{cell.w_main:g}\t{cell.alpha:g}\t{cell.gamma:g}"
                     f"\t{cell.dev_loss:.12g}\t{cell.best_epoch}")
    text = "\n".join(lines) + "\n"
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "grid.tsv"), text)
    save_checkpoint(result.best_checkpoint, os.path.join(args.out, "best"))
    if not args.no_figures:
        from .figures import save_grid_figure
        save_grid_figure(result, os.path.join(args.out, "grid.png"))
    top = result.ranked[0]
    print(f"grid search over {len(result.ranked)} cells; best "
          f"w_main={top.w_main:g} alpha={top.alpha:g} gamma={top.gamma:g} "
          f"(dev loss {top.dev_loss:.6f})")
    print(f"best checkpoint written to {os.path.join(args.out, 'best')}")
    return EXIT_OK


def cmd_gradcheck(args):
    cases = run_suite(n_seeds=args.seeds)
    lines = _meta_lines()
    lines.append("seed\tframes\tclasses\tmax_rel_err\tstatus")
    ok = True
    for case in cases:
        passed = case.ok(GRADCHECK_TOLERANCE)
        ok = ok and passed
        lines.append(f"{case.seed}\t{case.n_frames}\t{case.n_classes}"
                     f"\t{case.max_rel_err:.3e}\t{'PASS' if passed else 'FAIL'}")
    worst = max(c.max_rel_err for c in cases)
    lines.append(f"# worst\t{worst:.3e}\t(tolerance {GRADCHECK_TOLERANCE:g})")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        atomic_write_text(args.out, text)
    return EXIT_OK if ok else EXIT_VALIDATION


_HANDLERS = {
    "validate": cmd_validate,
    "stats": cmd_stats,
    "merge": cmd_merge,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "grid-search": cmd_grid_search,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = os.environ.get("DYSFLUX_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s",
                        stream=sys.stderr)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    logger.info("resolved configuration: %s", json.dumps(resolved, sort_keys=True, default=str))
    handler = _HANDLERS[args.command]
    try:
        return handler(args)
    except ManifestError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
