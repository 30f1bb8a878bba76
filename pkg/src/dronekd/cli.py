"""Command-line entry points.

Subcommands: gen-data, train-teacher, train-student, distill, eval, ablate,
stats, flops. Every command accepts ``--config FILE`` plus repeatable
``--set key=value`` overrides. Exit codes: 0 success, 1 config error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .boxes import AnchorGrid
from .cocoio import export_coco
from .detector import GFLDetector, ModelConfig, assign_targets
from .engine import Tensor, load_checkpoint, no_grad
from .evalmetrics import (
    anchor_overlap_stats,
    cosine_distance_map,
    positive_area_ratio_stats,
    raster_csv,
)
from .expconfig import ConfigError, ExperimentConfig, default_config_text, load_config, parse_config
from .lightml import flop_overhead
from .synth import write_ppm
from .training import (
    DivergenceError,
    build_datasets,
    evaluate_model,
    model_config_from_dict,
    run_ablation,
    run_distillation,
    run_training,
)


def _load(args) -> ExperimentConfig:
    overrides = args.set or []
    if args.config:
        return load_config(args.config, overrides)
    return parse_config("", overrides)


def _cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out_dir) / "data"
    out.mkdir(parents=True, exist_ok=True)
    train, test = build_datasets(cfg)
    for split, ds in (("train", train), ("test", test)):
        (out / f"{split}.json").write_text(export_coco(ds))
        if args.ppm and ds.images is not None:
            img_dir = out / split
            img_dir.mkdir(exist_ok=True)
            for i, img in enumerate(ds.images):
                write_ppm(img, img_dir / f"{split}_{i:06d}.ppm")
    print(f"wrote {len(train)} train / {len(test)} test annotations to {out}")
    if train.shortfall:
        print(f"note: {train.shortfall} objects dropped by the foreground budget")
    return 0


def _cmd_train(args, role: str) -> int:
    cfg = _load(args)
    result = run_training(cfg, role=role, run_name=args.name)
    _print_run(result)
    return 0


def _cmd_distill(args) -> int:
    cfg = _load(args)
    result = run_distillation(cfg, args.teacher, run_name=args.name)
    _print_run(result)
    return 0


def _print_run(result) -> None:
    if result.metrics:
        last = result.metrics[-1]
        print(
            f"final epoch {last['epoch']}: mAP={last['mAP']:.4f} "
            f"AP50={last['AP50']:.4f} AP75={last['AP75']:.4f} AP_S={last['AP_S']:.4f}"
        )
    print(f"run dir: {result.run_dir}")
    print(f"checkpoint: {result.checkpoint}")


def _cmd_eval(args) -> int:
    cfg = _load(args)
    state, meta = load_checkpoint(args.ckpt)
    model_cfg = model_config_from_dict(meta["model"])
    model = GFLDetector(model_cfg, np.random.default_rng(0))
    model.load_state_dict({k: v for k, v in state.items() if not k.startswith("recon.")})
    _, test = build_datasets(cfg)
    result = evaluate_model(model, test, cfg)
    print(result.to_csv(), end="")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(result.to_csv())
    (out / "eval.json").write_text(json.dumps(result.summary(), sort_keys=True, indent=2))
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load(args)
    sweep = {}
    for item in args.sweep:
        if "=" not in item:
            raise ConfigError(f"sweep must be key=v1,v2,..., got {item!r}")
        key, values = item.split("=", 1)
        sweep[key.strip()] = [v.strip() for v in values.split(",")]
    rows = run_ablation(cfg, sweep, args.teacher, workers=args.workers)
    for row in rows:
        print(row)
    print(f"table: {Path(cfg.out_dir) / 'ablation.csv'}")
    return 0


def _cmd_stats(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out_dir) / "stats"
    out.mkdir(parents=True, exist_ok=True)
    train, _ = build_datasets(cfg)
    size = cfg.data.image_size
    anchors = AnchorGrid((size, size), cfg.student.strides)

    overlap = anchor_overlap_stats(train.annotations, anchors, args.anchor_scale)
    for name, hist in (("iou", overlap.iou), ("giou", overlap.giou), ("diou", overlap.diou)):
        (out / f"overlap_{name}.csv").write_text(hist.to_csv())
        print(
            f"mean {name}: median small={hist.median_small:.4f} "
            f"large={hist.median_large:.4f}"
        )

    assignments = [assign_targets(anchors, anns, cfg.student) for anns in train.annotations]
    ratio = positive_area_ratio_stats(train.annotations, assignments, anchors)
    (out / "positive_area_ratio.csv").write_text(ratio.hist.to_csv())
    print(
        f"positive-region area ratio: median small={ratio.hist.median_small:.4f} "
        f"large={ratio.hist.median_large:.4f}"
    )

    if args.teacher and args.student:
        t_state, t_meta = load_checkpoint(args.teacher)
        s_state, s_meta = load_checkpoint(args.student)
        teacher = GFLDetector(model_config_from_dict(t_meta["model"]), np.random.default_rng(0))
        teacher.load_state_dict({k: v for k, v in t_state.items() if not k.startswith("recon.")})
        student = GFLDetector(model_config_from_dict(s_meta["model"]), np.random.default_rng(0))
        student.load_state_dict({k: v for k, v in s_state.items() if not k.startswith("recon.")})
        img = Tensor(train.images[args.image][None].astype(np.float32))
        with no_grad():
            t_out, s_out = teacher(img), student(img)
        for li in range(len(t_out.levels)):
            dist, _ = cosine_distance_map(
                t_out.levels[li].reg_map.data[0], s_out.levels[li].reg_map.data[0]
            )
            (out / f"cosine_distance_L{li}.csv").write_text(raster_csv(dist))
        print(f"cosine-distance maps written for image {args.image}")
    print(f"stats dir: {out}")
    return 0


def _cmd_flops(args) -> int:
    cfg = _load(args)
    size = (cfg.data.image_size, cfg.data.image_size)
    for role, model_cfg in (("student", cfg.student), ("teacher", cfg.teacher)):
        model = GFLDetector(model_cfg, np.random.default_rng(0))
        report = model.flop_report(size)
        print(f"{role}: {report.total:,} FLOPs ({report.total / 1e9:.4f} G)")
        if args.verbose:
            print(report)
    delta = flop_overhead(cfg.student.head_channels, cfg.student.light_ml_k,
                          size, cfg.student.strides)
    print(
        f"mutual-lifting overhead at k={cfg.student.light_ml_k}: "
        f"{delta.total:,} FLOPs ({delta.total / 1e9:.4f} G)"
    )
    return 0


def _cmd_print_config(_args) -> int:
    print(default_config_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dronekd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--ppm", action="store_true", help="also write PPM images")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the teacher detector")
    common(p)
    p.add_argument("--name", help="run directory name")
    p.set_defaults(func=lambda a: _cmd_train(a, "teacher"))

    p = sub.add_parser("train-student", help="train the student baseline")
    common(p)
    p.add_argument("--name", help="run directory name")
    p.set_defaults(func=lambda a: _cmd_train(a, "student"))

    p = sub.add_parser("distill", help="train the student with distillation")
    common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--name", help="run directory name")
    p.set_defaults(func=_cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="sweep config keys, one run per point")
    common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--sweep", action="append", required=True,
                   metavar="KEY=V1,V2,...", help="sweep values (repeatable)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("stats", help="dataset and teacher-student statistics")
    common(p)
    p.add_argument("--anchor-scale", type=float, default=8.0,
                   help="anchor box side in strides")
    p.add_argument("--teacher", help="teacher checkpoint for distance maps")
    p.add_argument("--student", help="student checkpoint for distance maps")
    p.add_argument("--image", type=int, default=0, help="image index for maps")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("flops", help="analytic FLOP reports")
    common(p)
    p.add_argument("--verbose", action="store_true", help="per-layer breakdown")
    p.set_defaults(func=_cmd_flops)

    p = sub.add_parser("print-config", help="print all config keys with defaults")
    p.set_defaults(func=_cmd_print_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
