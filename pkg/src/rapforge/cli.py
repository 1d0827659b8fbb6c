"""Command-line driver: train, eval, uniform-dataset, heatmap, transfer, synth."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import AttackConfig, load_train_config, load_transfer_spec
from .datasets import SceneSpec, generate_synthetic_dataset
from .detectors import get_detector
from .evaluation import (
    ReportRow,
    UniformDatasetSpec,
    evaluate,
    make_uniform_dataset,
    positional_heatmaps,
    transfer_matrix,
    write_report_csv,
)
from .patching import load_patch
from .training import train


def _cmd_train(args) -> int:
    spec = load_train_config(args.config)
    detector = get_detector(spec.detector)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    patch, history = train(
        spec.dataset, detector, spec.attack, out_dir=out_dir, val_dataset=spec.val_dataset
    )
    final = [row for row in history if row.tp is not None]
    if final:
        print(f"final validation: tp={final[-1].tp} fp={final[-1].fp}")
    print(f"patch and history written to {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    patch = None
    method = "none"
    if args.patch:
        patch, _ = load_patch(args.patch)
        method = Path(args.patch).stem
    detector = get_detector(args.detector)
    cfg = AttackConfig(placement=args.placement)
    dump = Path(args.dump_detections) if args.dump_detections else None
    report = evaluate(args.dataset, patch, detector, cfg, dump_dir=dump)
    row = ReportRow(
        dataset=Path(args.dataset).parent.name or str(args.dataset),
        method=method,
        model=args.detector,
        f_value=report.f_value,
        ap=report.ap,
        gt=report.gt_count,
        tp=report.tp_count,
        fp=report.fp_count,
    )
    write_report_csv(args.report, [row])
    print(
        f"F={report.f_value:.4f} AP={report.ap:.4f} "
        f"GT={report.gt_count} TP={report.tp_count} FP={report.fp_count}"
    )
    print(f"report written to {args.report}")
    return 0


def _cmd_uniform(args) -> int:
    src_dir = Path(args.src)
    sources = sorted(p for p in src_dir.glob("*.png") if not p.name.endswith(".mask.png"))
    if not sources:
        print(f"no source images found under {src_dir}", file=sys.stderr)
        return 1
    detector = get_detector(args.detector)
    spec = UniformDatasetSpec(source_images=sources, out_dir=Path(args.out), stride=args.stride)
    manifest = make_uniform_dataset(spec, detector)
    print(f"manifest written to {manifest}")
    return 0


def _cmd_heatmap(args) -> int:
    patch = None
    if args.patch:
        patch, _ = load_patch(args.patch)
    detector = get_detector(args.detector)
    cfg = AttackConfig(placement=args.placement)
    grid = positional_heatmaps(
        args.manifest,
        patch,
        detector,
        cfg,
        bin_size=args.bin,
        corner=args.corner,
        out_dir=Path(args.out),
    )
    print(
        f"tp={int(grid.tp.sum())} fn={int(grid.fn.sum())} fp={int(grid.fp.sum())}; "
        f"heat-maps written to {args.out}"
    )
    return 0


def _cmd_transfer(args) -> int:
    spec = load_transfer_spec(args.runs)
    rows = transfer_matrix(spec.runs, spec.datasets, spec.detectors, spec.attack)
    write_report_csv(args.out, rows)
    for r in rows:
        print(
            f"{r.dataset:>20} {r.model:>8} F={r.f_value:.4f} AP={r.ap:.4f} "
            f"GT={r.gt} TP={r.tp} FP={r.fp}"
        )
    print(f"table written to {args.out}")
    return 0


def _cmd_synth(args) -> int:
    detector = get_detector(args.detector)
    manifest = generate_synthetic_dataset(
        Path(args.out), count=args.count, seed=args.seed, detector=detector, scene_spec=SceneSpec()
    )
    print(f"manifest written to {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rapforge",
        description="Train and evaluate detection-obstructing background patches.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="enable info logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a patch from a TOML run config")
    p.add_argument("--config", required=True, help="run config TOML")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a patch (or the clean baseline) on a dataset")
    p.add_argument("--patch", default=None, help="patch PNG; omit for the clean baseline")
    p.add_argument("--dataset", required=True, help="dataset manifest (JSON lines)")
    p.add_argument("--detector", default="toy")
    p.add_argument("--placement", default="tile", choices=["tile", "fixed"])
    p.add_argument("--report", required=True, help="output CSV path")
    p.add_argument(
        "--dump-detections", default=None, help="directory for per-image detection JSONL dumps"
    )
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("uniform-dataset", help="build a coordinate-shifted dataset")
    p.add_argument("--src", required=True, help="directory of source images (+ mask sidecars)")
    p.add_argument("--stride", type=int, default=25)
    p.add_argument("--detector", default="toy")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_uniform)

    p = sub.add_parser("heatmap", help="positional TP/FN/FP heat-maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--patch", default=None)
    p.add_argument("--detector", default="toy")
    p.add_argument("--placement", default="tile", choices=["tile", "fixed"])
    p.add_argument("--bin", type=int, default=25, help="bin size in pixels")
    p.add_argument("--corner", default="top_left", choices=["top_left", "top_right"])
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_heatmap)

    p = sub.add_parser("transfer", help="cross-dataset transfer table from a runs TOML")
    p.add_argument("--runs", required=True, help="transfer spec TOML")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_transfer)

    p = sub.add_parser("synth-dataset", help="generate a synthetic blob-face dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--detector", default="toy")
    p.set_defaults(func=_cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
