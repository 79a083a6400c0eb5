"""Command line entry point: ``mipa {train,eval,grid,gen-data}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np
from PIL import Image

from .config import ConfigError, ExperimentConfig, bundled_config
from .data import SceneSpec, generate_scene
from .evaluation import EvalReport
from .training import load_datasets, run_ablation_grid, run_eval, run_training


def _load_config(args) -> ExperimentConfig:
    if args.config:
        config = ExperimentConfig.load(args.config)
    else:
        config = ExperimentConfig.from_dict(bundled_config("default"))
    overrides = list(args.override or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return config.with_overrides(overrides) if overrides else config


def _write_report(report: EvalReport, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(report.to_json())
    row = report.to_row()
    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)


def cmd_train(args):
    config = _load_config(args)
    result = run_training(config, out_dir=args.out_dir)
    print(json.dumps({"out_dir": args.out_dir, "elapsed_s": round(result.elapsed, 1),
                      **result.report.to_row()}, indent=2))


def cmd_eval(args):
    if args.config:
        config = _load_config(args)
    else:
        import torch
        archive = torch.load(args.checkpoint, map_location="cpu", weights_only=False)
        config = ExperimentConfig.from_dict(archive["experiment"])
        if args.override:
            config = config.with_overrides(args.override)
    _, test = load_datasets(config)
    report = run_eval(args.checkpoint, test, args.modality)
    if args.out_dir:
        _write_report(report, args.out_dir)
    for row in report.rows():
        print("{modality:>8}  AP50 {ap50:.4f}  AP75 {ap75:.4f}  AP {ap:.4f}".format(**row))


def cmd_grid(args):
    config = _load_config(args)
    if args.grid and os.path.exists(args.grid):
        with open(args.grid) as fh:
            grid = json.load(fh)
    elif args.grid:
        grid = bundled_config(args.grid)
    else:
        grid = None
    rows = run_ablation_grid(config, grid, seeds=tuple(range(args.seeds)), out_dir=args.out_dir)
    for row in rows:
        print(f"{row['label']:<40} RGB {row['ap50_rgb_mean']:.3f}±{row['ap50_rgb_std']:.3f}  "
              f"IR {row['ap50_ir_mean']:.3f}±{row['ap50_ir_std']:.3f}  AVG {row['ap50_avg_mean']:.3f}")


def cmd_gen_data(args):
    """Render synthetic pairs to ``visible/`` and ``infrared/`` PNGs plus a COCO annotation file."""
    config = _load_config(args)
    spec_fields = dict(config.dataset.synthetic)
    spec_fields.setdefault("patch_size", config.encoder.patch_size)
    spec = SceneSpec(**spec_fields)
    for sub in ("visible", "infrared"):
        os.makedirs(os.path.join(args.out_dir, sub), exist_ok=True)
    h, w = spec.image_size
    images, annotations = [], []
    for i in range(args.count):
        sample = generate_scene(spec, args.start + i)
        name = f"{args.start + i:07d}.png"
        Image.fromarray(np.round(sample.image_g * 255).astype(np.uint8)).save(
            os.path.join(args.out_dir, "visible", name))
        Image.fromarray(np.round(sample.image_f[:, :, 0] * 255).astype(np.uint8)).save(
            os.path.join(args.out_dir, "infrared", name))
        images.append({"id": i, "file_name": f"visible/{name}", "width": w, "height": h})
        for b in sample.gt.boxes:
            x0, y0, x1, y1 = b.xyxy()
            annotations.append({"id": len(annotations), "image_id": i, "category_id": b.class_id + 1,
                                "bbox": [x0 * w, y0 * h, (x1 - x0) * w, (y1 - y0) * h],
                                "area": (x1 - x0) * w * (y1 - y0) * h, "iscrowd": 0})
    categories = [{"id": k + 1, "name": f"class_{k}"} for k in range(spec.object_classes)]
    with open(os.path.join(args.out_dir, "annotations.json"), "w") as fh:
        json.dump({"images": images, "annotations": annotations, "categories": categories}, fh)
    print(f"wrote {args.count} pairs to {args.out_dir}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mipa", description="Mixed-patch RGB/IR detector training")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="experiment config JSON (default: bundled default config)")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="dotted config override, e.g. ma.gamma=0.1 (repeatable)")
        p.add_argument("--out-dir", dest="out_dir")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train one regime")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on pure RGB and/or IR test images")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--modality", choices=("rgb", "ir", "both-separately"), default="both-separately")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="run an ablation grid over seeds")
    common(p, seed=False)
    p.add_argument("--grid", help="grid JSON file or bundled grid name (e.g. rho_strategies, gamma, trend)")
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("gen-data", help="render synthetic pairs in COCO layout")
    common(p, seed=False)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--start", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command in ("train", "grid", "gen-data") and not args.out_dir:
        print(f"mipa {args.command}: --out-dir is required", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
