"""Training, distillation, and ablation orchestration.

Every run is a pure function of (config, seed): model init, batch order, and
global-distillation masks draw from independent generators derived from the
run seed, datasets from the dataset seed, so reruns produce byte-identical
metrics logs and checkpoints.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
import platform
import sys
from dataclasses import dataclass
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .boxes import AnchorGrid
from .cocoio import load_coco_annotations
from .detector import (
    GFLDetector,
    ModelConfig,
    assign_targets,
    decode_batch,
    detection_loss,
)
from .distill import (
    DistillWeights,
    ReconstructionModule,
    classification_kd_loss,
    compute_vlr_weights,
    focal_distill_loss,
    global_distill_loss,
    localization_distill_loss,
)
from .engine import SGD, Tensor, load_checkpoint, no_grad, save_checkpoint
from .evalmetrics import EvalResult, evaluate
from .expconfig import ConfigError, ExperimentConfig, flatten, to_text
from .synth import Dataset, generate_dataset

METRIC_COLUMNS = (
    "epoch", "loss_cls", "loss_reg", "loss_dfl",
    "kd_cls", "kd_focal", "kd_global",
    "mAP", "AP50", "AP75", "AP_S",
)


class DivergenceError(RuntimeError):
    """Training loss became non-finite; last finite state was saved."""


@dataclass
class RunResult:
    run_dir: Path
    checkpoint: Path
    metrics: list[dict]
    final_eval: EvalResult | None


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.data.kind == "synthetic":
        spec = cfg.data.scene_spec()
        train = generate_dataset(spec, cfg.data.train_images, split="train")
        test = generate_dataset(
            spec, cfg.data.test_images, split="test", start_index=cfg.data.train_images
        )
        return train, test
    if cfg.data.kind == "coco":
        ds, _ = load_coco_annotations(Path(cfg.data.coco_annotations).read_text())
        if ds.images is None:
            raise ConfigError(
                "COCO runs need pixel data; synthesize images or use kind=synthetic"
            )
        return ds, ds
    raise ConfigError(f"unknown data.kind {cfg.data.kind!r}")


def _flip_annotations(anns, width):
    from .boxes import BBox

    return [(BBox(width - b.x2, b.y1, width - b.x1, b.y2), c) for b, c in anns]


def model_config_from_dict(d: dict) -> ModelConfig:
    kwargs = dict(d)
    for key in ("strides", "backbone_widths"):
        kwargs[key] = tuple(kwargs[key])
    kwargs["scale_ranges"] = tuple(tuple(p) for p in kwargs["scale_ranges"])
    return ModelConfig(**kwargs)


def _fingerprint() -> str:
    return (
        f"python={sys.version.split()[0]}\n"
        f"numpy={np.__version__}\n"
        f"platform={platform.platform()}\n"
    )


def _format_row(row: dict) -> str:
    cells = []
    for col in METRIC_COLUMNS:
        v = row[col]
        cells.append(str(v) if col == "epoch" else f"{v:.6f}")
    return ",".join(cells)


def evaluate_model(model: GFLDetector, dataset: Dataset, cfg: ExperimentConfig,
                   batch: int = 20) -> EvalResult:
    dets = []
    with no_grad():
        for start in range(0, len(dataset), batch):
            imgs = np.stack(dataset.images[start : start + batch]).astype(np.float32)
            out = model(Tensor(imgs))
            dets.extend(
                decode_batch(out, cfg.eval.score_thresh, cfg.eval.nms_iou,
                             cfg.eval.max_dets)
            )
    return evaluate(dets, dataset.annotations)


def _teacher_flat(t_out, num_bins):
    """Teacher logits as per-level constant arrays, anchors-major."""
    cls_flat, reg_flat = [], []
    for level in t_out.levels:
        n, c, h, w = level.cls_map.shape
        cls_flat.append(
            level.cls_map.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
        )
        reg_flat.append(
            level.reg_map.data.transpose(0, 2, 3, 1).reshape(n * h * w, 4, num_bins)
        )
    return cls_flat, reg_flat


def _batch_weights(t_out, anchors, asgs, distill_cfg) -> DistillWeights:
    """Concatenate per-image weight maps to match anchors-major flat layout."""
    per_level_main = [[] for _ in t_out.levels]
    per_level_vlr = [[] for _ in t_out.levels]
    for img, asg in enumerate(asgs):
        w = compute_vlr_weights(t_out, anchors, asg.gt_boxes, asg, distill_cfg,
                                image_index=img)
        for li in range(len(t_out.levels)):
            per_level_main[li].append(w.i_main[li])
            per_level_vlr[li].append(w.i_vlr[li])
    return DistillWeights(
        i_main=[np.concatenate(v) for v in per_level_main],
        i_vlr=[np.concatenate(v) for v in per_level_vlr],
    )


def _train(cfg: ExperimentConfig, model_cfg: ModelConfig, run_name: str,
           teacher_state: dict | None = None,
           teacher_cfg: ModelConfig | None = None) -> RunResult:
    run_dir = Path(cfg.out_dir) / run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(to_text(cfg))
    (run_dir / "fingerprint.txt").write_text(_fingerprint())

    train_ds, test_ds = build_datasets(cfg)
    if train_ds.images is None:
        raise ConfigError("training requires pixel data")

    init_rng = np.random.default_rng([cfg.seed, 101])
    model = GFLDetector(model_cfg, init_rng)
    distilling = teacher_state is not None
    recon = None
    teacher = None
    if distilling:
        if teacher_cfg.num_classes != model_cfg.num_classes or \
                teacher_cfg.num_bins != model_cfg.num_bins:
            raise ConfigError(
                "incompatible teacher: classes/bins "
                f"{teacher_cfg.num_classes}/{teacher_cfg.num_bins} vs student "
                f"{model_cfg.num_classes}/{model_cfg.num_bins}"
            )
        teacher = GFLDetector(teacher_cfg, np.random.default_rng(0))
        teacher.load_state_dict(teacher_state)
        if cfg.kd.global_distill:
            recon = ReconstructionModule(4 * model_cfg.num_bins, init_rng)

    params = model.parameters() + (recon.parameters() if recon else [])
    opt = SGD(params, cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay)
    data_rng = np.random.default_rng([cfg.seed, 202])
    mask_rng = np.random.default_rng([cfg.seed, 303])

    smax = max(model_cfg.strides)
    h, w = train_ds.images[0].shape[1:]
    if h % smax or w % smax:
        raise ConfigError(f"image size {h}x{w} must divide by max stride {smax}")
    anchors = AnchorGrid((h, w), model_cfg.strides)
    assignments = [assign_targets(anchors, anns, model_cfg)
                   for anns in train_ds.annotations]
    # Horizontal flips reuse precomputed assignments for the mirrored boxes.
    flipped_images = flipped_assignments = None
    if cfg.optim.hflip:
        flipped_images = [img[:, :, ::-1].copy() for img in train_ds.images]
        flipped_assignments = [
            assign_targets(anchors, _flip_annotations(anns, w), model_cfg)
            for anns in train_ds.annotations
        ]

    n = len(train_ds)
    bs = cfg.optim.batch_size
    epochs = cfg.optim.epochs
    decay_epochs = sorted(int(math.floor(fr * epochs)) for fr in cfg.optim.decay_at)
    num_bins = model_cfg.num_bins
    need_weights = distilling and (cfg.kd.cid or cfg.kd.cls_kd)

    rows: list[dict] = []
    last_eval: EvalResult | None = None
    global_step = 0
    for epoch in range(epochs):
        lr = cfg.optim.lr * (cfg.optim.decay_factor ** sum(epoch >= d for d in decay_epochs))
        order = data_rng.permutation(n)
        sums = {k: 0.0 for k in METRIC_COLUMNS[1:7]}
        batches = 0
        flip = (
            data_rng.random(n) < 0.5
            if cfg.optim.hflip
            else np.zeros(n, dtype=bool)
        )
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            imgs = Tensor(np.stack([
                flipped_images[i] if flip[i] else train_ds.images[i] for i in idx
            ]).astype(np.float32))
            asgs = [
                flipped_assignments[i] if flip[i] else assignments[i] for i in idx
            ]

            out = model(imgs)
            cls_l, reg_l, dfl_l = detection_loss(out, asgs)
            if distilling and not cfg.kd.detection:
                loss = Tensor(np.float32(0.0))
            else:
                loss = cls_l + reg_l + dfl_l

            kd_cls_v = kd_focal_v = kd_global_v = 0.0
            if distilling:
                with no_grad():
                    t_out = teacher(imgs)
                if need_weights:
                    weights = _batch_weights(t_out, anchors, asgs, cfg.distill)
                    t_cls, t_reg = _teacher_flat(t_out, num_bins)
                if cfg.kd.cls_kd:
                    s_cls = [lv.cls_flat() for lv in out.levels]
                    kd_cls = classification_kd_loss(
                        t_cls, s_cls, weights, cfg.distill.tau,
                        include_vlr=cfg.distill.cls_kd_include_vlr,
                        alpha=cfg.distill.alpha,
                    ) * cfg.kd.cls_weight
                    loss = loss + kd_cls
                    kd_cls_v = kd_cls.item()
                l_focal = Tensor(np.float32(0.0))
                l_global = Tensor(np.float32(0.0))
                if cfg.kd.cid:
                    s_reg = [lv.reg_flat(num_bins) for lv in out.levels]
                    l_focal = focal_distill_loss(
                        t_reg, s_reg, weights, cfg.distill.alpha, cfg.distill.tau
                    )
                    kd_focal_v = l_focal.item()
                if cfg.kd.global_distill:
                    l_global = global_distill_loss(
                        [lv.reg_map.data for lv in t_out.levels],
                        [lv.reg_map for lv in out.levels],
                        cfg.distill.lam, recon, mask_rng,
                    )
                    kd_global_v = l_global.item()
                if cfg.kd.cid or cfg.kd.global_distill:
                    loss = loss + localization_distill_loss(
                        l_focal, l_global, cfg.distill.beta
                    )

            if not math.isfinite(loss.item()):
                _save(run_dir, model, recon, model_cfg, cfg)
                _write_metrics(run_dir, rows)
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {global_step}; "
                    f"last finite state saved to {run_dir}"
                )

            if global_step < cfg.optim.warmup_steps:
                opt.lr = lr * (global_step + 1) / cfg.optim.warmup_steps
            else:
                opt.lr = lr
            opt.zero_grad()
            loss.backward()
            opt.step()
            global_step += 1
            batches += 1
            sums["loss_cls"] += cls_l.item()
            sums["loss_reg"] += reg_l.item()
            sums["loss_dfl"] += dfl_l.item()
            sums["kd_cls"] += kd_cls_v
            sums["kd_focal"] += kd_focal_v
            sums["kd_global"] += kd_global_v

        last_eval = evaluate_model(model, test_ds, cfg)
        row = {"epoch": epoch}
        row.update({k: v / max(batches, 1) for k, v in sums.items()})
        row.update({"mAP": last_eval.map, "AP50": last_eval.ap50,
                    "AP75": last_eval.ap75, "AP_S": last_eval.ap_s})
        rows.append(row)

    ckpt = _save(run_dir, model, recon, model_cfg, cfg)
    _write_metrics(run_dir, rows)
    return RunResult(run_dir=run_dir, checkpoint=ckpt, metrics=rows,
                     final_eval=last_eval)


def _save(run_dir: Path, model, recon, model_cfg, cfg) -> Path:
    tensors = dict(model.state_dict())
    if recon is not None:
        tensors.update({f"recon.{k}": v for k, v in recon.state_dict().items()})
    meta = {
        "model": dataclasses.asdict(model_cfg),
        "config": flatten(cfg),
    }
    path = run_dir / "model_final.ckpt"
    save_checkpoint(path, tensors, meta)
    return path


def _write_metrics(run_dir: Path, rows: list[dict]) -> None:
    lines = [",".join(METRIC_COLUMNS)]
    lines += [_format_row(r) for r in rows]
    (run_dir / "metrics.csv").write_text("\n".join(lines) + "\n")


def run_training(cfg: ExperimentConfig, role: str = "student",
                 run_name: str | None = None) -> RunResult:
    """Plain detection training of the teacher or the student baseline."""
    if role not in ("student", "teacher"):
        raise ConfigError(f"role must be student or teacher, got {role!r}")
    model_cfg = cfg.student if role == "student" else cfg.teacher
    return _train(cfg, model_cfg, run_name or f"{role}_seed{cfg.seed}")


def run_distillation(cfg: ExperimentConfig, teacher_ckpt,
                     run_name: str | None = None) -> RunResult:
    """Student training with teacher supervision and the configured KD terms."""
    state, meta = load_checkpoint(teacher_ckpt)
    teacher_cfg = model_config_from_dict(meta["model"])
    state = {k: v for k, v in state.items() if not k.startswith("recon.")}
    return _train(
        cfg, cfg.student, run_name or f"distill_seed{cfg.seed}",
        teacher_state=state, teacher_cfg=teacher_cfg,
    )


SWEEP_KEYS = {
    "k": "student.light_ml_k",
    "gamma": "distill.gamma",
    "gamma_ld": "distill.gamma_ld",
    "lambda_vlr": "distill.lambda_vlr",
    "mode": "distill.mode",
    "light_ml": "student.light_ml",
    "cid": "kd.cid",
    "global": "kd.global_distill",
    "cls_kd": "kd.cls_kd",
}

ABLATION_COLUMNS = ("mAP", "AP50", "AP75", "AP_S", "flops")


def _ablation_worker(args):
    text, overrides, teacher_ckpt, run_name = args
    from .expconfig import parse_config

    cfg = parse_config(text, overrides)
    result = run_distillation(cfg, teacher_ckpt, run_name=run_name)
    model = GFLDetector(cfg.student, np.random.default_rng(0))
    flops = model.flop_report((cfg.data.image_size, cfg.data.image_size)).total
    last = result.metrics[-1]
    return {
        "mAP": last["mAP"], "AP50": last["AP50"], "AP75": last["AP75"],
        "AP_S": last["AP_S"], "flops": flops,
    }


def run_ablation(cfg: ExperimentConfig, sweep: dict[str, list], teacher_ckpt,
                 workers: int = 1) -> list[dict]:
    """One distillation run per sweep-grid point; returns table rows.

    ``sweep`` maps declared keys (see ``SWEEP_KEYS``) to value lists. Rows
    carry the swept values plus final metrics and the student FLOP count.
    """
    for key in sweep:
        if key not in SWEEP_KEYS:
            raise ConfigError(
                f"unknown sweep key {key!r}; declared keys: {sorted(SWEEP_KEYS)}"
            )
    keys = sorted(sweep)
    grid = list(itertools.product(*(sweep[k] for k in keys)))
    base_text = to_text(cfg)
    jobs = []
    for point in grid:
        overrides = [f"{SWEEP_KEYS[k]}={v}" for k, v in zip(keys, point)]
        name = "ablate_" + "_".join(f"{k}-{v}" for k, v in zip(keys, point))
        jobs.append((base_text, overrides, str(teacher_ckpt), name))

    if workers > 1:
        with get_context("spawn").Pool(workers) as pool:
            outputs = pool.map(_ablation_worker, jobs)
    else:
        outputs = [_ablation_worker(j) for j in jobs]

    rows = []
    for point, metrics in zip(grid, outputs):
        row = {k: v for k, v in zip(keys, point)}
        row.update(metrics)
        rows.append(row)
    _write_ablation_csv(Path(cfg.out_dir) / "ablation.csv", keys, rows)
    return rows


def _write_ablation_csv(path: Path, keys: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    header = list(keys) + list(ABLATION_COLUMNS)
    lines = [",".join(header)]
    for row in rows:
        cells = [str(row[k]) for k in keys]
        cells += [f"{row[c]:.6f}" if c != "flops" else str(row[c])
                  for c in ABLATION_COLUMNS]
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")
