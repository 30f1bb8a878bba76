"""Distillation losses and region weighting.

The valuable-localization-region (VLR) weights select background anchors
worth distilling. Three modes are supported:

* ``cid``: centerness of each anchor inside the box the frozen teacher
  predicts at it, gated by a spatial filter (anchor within 0.75x the
  diagonal of the nearest ground-truth box, measured center-to-point) and by
  the weighting rule ``1 - c if c < gamma else 0``.
* ``cid_within_gt``: the classic formulation where centerness is computed
  against ground-truth boxes and is only defined inside them; ambiguous
  anchors use the smallest containing box.
* ``ld_vlr``: DIoU-gated baseline; anchors whose best DIoU against the GTs
  falls below ``gamma_ld * alpha_pos`` are weighted by their IoU, scaled by
  ``lambda_vlr``.

Positive anchors are excluded from every mode, so main-region and VLR
supports are disjoint. All weight arithmetic runs in float64 so a scalar
per-anchor recomputation reproduces the maps exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import AnchorGrid, centerness_array, pairwise_metrics
from .boxes import _expected_offsets  # shared decode path, keeps bit parity
from .detector.assign import AssignmentResult
from .detector.model import DetectionOutput
from .engine import Conv2d, Module, Tensor, abs_, log_softmax, relu, take, where

MODES = ("cid", "cid_within_gt", "ld_vlr")


@dataclass
class DistillConfig:
    gamma: float = 0.45        # centerness cutoff for VLR membership
    alpha: float = 1.0         # VLR weight in the focal distillation loss
    beta: float = 4.0          # global loss weight in the combined loss
    lam: float = 0.65          # masked fraction for global distillation
    tau: float = 10.0          # KD temperature (classification and regression)
    mode: str = "cid"
    gamma_ld: float = 0.4
    alpha_pos: float = 0.5     # positive-region threshold the LD rule scales
    lambda_vlr: float = 0.25
    anchor_box_scale: float = 8.0  # LD anchor boxes: side = scale * stride
    cls_kd_include_vlr: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class DistillWeights:
    i_main: list[np.ndarray]  # per level, (n,) float64
    i_vlr: list[np.ndarray]

    @property
    def num_levels(self) -> int:
        return len(self.i_main)


def compute_vlr_weights(teacher_out: DetectionOutput, anchors: AnchorGrid,
                        gts: np.ndarray, asg: AssignmentResult,
                        cfg: DistillConfig, image_index: int = 0) -> DistillWeights:
    """Per-anchor distillation weights from a frozen teacher's outputs.

    ``gts`` is an (m, 4) array of ground-truth corner boxes. ``asg`` supplies
    the positive (main-region) weights; VLR weights are zeroed on positive
    anchors so the two supports never overlap.
    """
    cfg.validate()
    num_bins = teacher_out.levels[0].reg_map.shape[1] // 4
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    m = gts.shape[0]
    centers = np.stack([(gts[:, 0] + gts[:, 2]) / 2.0, (gts[:, 1] + gts[:, 3]) / 2.0], axis=1)
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    diags = np.sqrt(gw * gw + gh * gh)
    gt_areas = (gts[:, 2] - gts[:, 0]) * (gts[:, 3] - gts[:, 1])

    i_main_levels: list[np.ndarray] = []
    i_vlr_levels: list[np.ndarray] = []
    for li, level in enumerate(teacher_out.levels):
        pts = anchors.points(li)
        n = pts.shape[0]
        stride = anchors.strides[li]
        i_main = asg.i_main[asg.level_slices[li]].astype(np.float64).copy()
        vlr = np.zeros(n, dtype=np.float64)

        if m > 0:
            if cfg.mode == "cid":
                reg = (
                    level.reg_map.data[image_index]
                    .transpose(1, 2, 0)
                    .reshape(n, 4, num_bins)
                    .astype(np.float64)
                )
                offs = _expected_offsets(reg, stride)  # anchor-to-side distances
                inside = (offs >= 0).all(axis=1)
                c = centerness_array(offs)
                dx = pts[:, None, 0] - centers[None, :, 0]
                dy = pts[:, None, 1] - centers[None, :, 1]
                d = np.sqrt(dx * dx + dy * dy)
                nearest = d.argmin(axis=1)
                near_ok = d[np.arange(n), nearest] <= 0.75 * diags[nearest]
                vlr = np.where(
                    inside & near_ok & (c < cfg.gamma) & (i_main == 0.0), 1.0 - c, 0.0
                )
            elif cfg.mode == "cid_within_gt":
                l = pts[:, None, 0] - gts[None, :, 0]
                t = pts[:, None, 1] - gts[None, :, 1]
                r = gts[None, :, 2] - pts[:, None, 0]
                b = gts[None, :, 3] - pts[:, None, 1]
                inside = (l >= 0) & (t >= 0) & (r >= 0) & (b >= 0)  # (n, m)
                cost = np.where(inside, gt_areas[None, :], np.inf)
                best = cost.argmin(axis=1)
                has = np.isfinite(cost[np.arange(n), best])
                offs = np.stack(
                    [l[np.arange(n), best], t[np.arange(n), best],
                     r[np.arange(n), best], b[np.arange(n), best]],
                    axis=1,
                )
                c = centerness_array(offs)
                vlr = np.where(
                    has & (c < cfg.gamma) & (i_main == 0.0), 1.0 - c, 0.0
                )
            else:  # ld_vlr
                aboxes = anchors.anchor_boxes(li, cfg.anchor_box_scale)
                iou, _, diou = pairwise_metrics(aboxes, gts)
                best = diou.argmax(axis=1)
                rows = np.arange(n)
                cond = diou[rows, best] < cfg.gamma_ld * cfg.alpha_pos
                vlr = np.where(
                    cond & (i_main == 0.0), cfg.lambda_vlr * iou[rows, best], 0.0
                )

        i_main_levels.append(i_main)
        i_vlr_levels.append(vlr)
    return DistillWeights(i_main=i_main_levels, i_vlr=i_vlr_levels)


# -- losses -------------------------------------------------------------------


def smooth_l1(x: float) -> float:
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside."""
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def smooth_l1_tensor(x: Tensor) -> Tensor:
    ax = abs_(x)
    return where(ax.data < 1.0, 0.5 * x * x, ax - 0.5)


def _kl_rows(teacher_logits: np.ndarray, student_logits: Tensor, tau: float) -> Tensor:
    """KL(softmax(t/tau) || softmax(s/tau)) summed over trailing axes, per row.

    The teacher side runs the same float32 stable log-softmax steps as the
    student graph, so identical logits yield an exact zero. The result is
    scaled by tau^2 to keep gradient magnitudes comparable across
    temperatures.
    """
    t = teacher_logits.astype(np.float32) * np.float32(1.0 / tau)
    shifted = t - t.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    p = np.exp(logp)

    logq = log_softmax(student_logits * (1.0 / tau), axis=-1)
    kl = (Tensor((p * logp).sum(axis=-1)) - (Tensor(p) * logq).sum(axis=-1))
    axes = tuple(range(1, len(kl.shape)))
    if axes:
        kl = kl.sum(axis=axes)
    return kl * (tau * tau)


def focal_distill_loss(teacher_reg: list[np.ndarray], student_reg: list[Tensor],
                       w: DistillWeights, alpha: float, tau: float = 10.0) -> Tensor:
    """Region-weighted regression distillation.

    Per level: mean over anchors of ``(i_main + alpha * i_vlr) * L_reg`` where
    ``L_reg`` is the temperature-scaled KL between teacher and student side
    distributions summed over the four sides; levels are averaged.
    ``teacher_reg``/``student_reg`` hold (n, 4, D) logits per level.
    """
    total = Tensor(np.float32(0.0))
    for li in range(w.num_levels):
        weight = w.i_main[li] + alpha * w.i_vlr[li]
        n = weight.shape[0]
        rows = np.where(weight > 0)[0]
        if rows.size == 0:
            continue
        kl = _kl_rows(teacher_reg[li][rows], take(student_reg[li], rows, axis=0), tau)
        total = total + (Tensor(weight[rows].astype(np.float32)) * kl).sum() * (1.0 / n)
    return total * (1.0 / w.num_levels)


def classification_kd_loss(teacher_cls: list[np.ndarray], student_cls: list[Tensor],
                           w: DistillWeights, tau: float = 10.0,
                           include_vlr: bool = False, alpha: float = 1.0) -> Tensor:
    """Main-region class-distribution distillation (per-anchor softmax KL)."""
    total = Tensor(np.float32(0.0))
    for li in range(w.num_levels):
        weight = w.i_main[li].copy()
        if include_vlr:
            weight = weight + alpha * w.i_vlr[li]
        n = weight.shape[0]
        rows = np.where(weight > 0)[0]
        if rows.size == 0:
            continue
        kl = _kl_rows(teacher_cls[li][rows], take(student_cls[li], rows, axis=0), tau)
        total = total + (Tensor(weight[rows].astype(np.float32)) * kl).sum() * (1.0 / n)
    return total * (1.0 / w.num_levels)


class ReconstructionModule(Module):
    """Two 3x3 convs that rebuild masked student maps; trained with the student."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        self.conv1 = Conv2d(channels, channels, kernel=3, padding=1, rng=rng)
        self.conv2 = Conv2d(channels, channels, kernel=3, padding=1, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(relu(self.conv1(x)))


def global_distill_loss(teacher_maps: list[np.ndarray], student_maps: list[Tensor],
                        lam: float, recon: ReconstructionModule,
                        rng: np.random.Generator) -> Tensor:
    """Masked-reconstruction distillation over per-level regression maps.

    Pixels are kept with probability ``1 - lam`` (i.e. ``lam`` is the masked
    fraction); the mask is drawn per pixel from ``rng`` each call and
    broadcast across channels.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    total = Tensor(np.float32(0.0))
    n_levels = len(student_maps)
    for t_map, s_map in zip(teacher_maps, student_maps):
        n, _, h, w_ = s_map.shape
        mask = (rng.random((n, 1, h, w_)) >= lam).astype(np.float32)
        rec = recon(s_map * Tensor(mask))
        diff = rec - Tensor(t_map.astype(np.float32))
        total = total + smooth_l1_tensor(diff).mean()
    return total * (1.0 / n_levels)


def localization_distill_loss(l_focal, l_global, beta: float):
    """Combined localization distillation: focal term plus beta * global term."""
    if isinstance(l_focal, (int, float)) and l_focal < 0:
        raise ValueError(f"focal term must be nonnegative, got {l_focal}")
    if isinstance(l_global, (int, float)) and l_global < 0:
        raise ValueError(f"global term must be nonnegative, got {l_global}")
    return l_focal + beta * l_global


def export_weight_maps(w: DistillWeights, anchors: AnchorGrid, prefix) -> list[Path]:
    """Write weight maps as CSV rasters, one file per level and kind.

    Format: a single ``#`` header line carrying level, stride, and grid size,
    followed by H rows of W comma-separated values in raster order.
    """
    paths = []
    prefix = Path(prefix)
    for li in range(w.num_levels):
        h, wd = anchors.level_hw[li]
        for kind, arr in (("i_main", w.i_main[li]), ("i_vlr", w.i_vlr[li])):
            path = prefix.parent / f"{prefix.name}_L{li}_{kind}.csv"
            grid = arr.reshape(h, wd)
            lines = [f"# level={li} stride={anchors.strides[li]} h={h} w={wd} kind={kind}"]
            lines += [",".join(f"{v:.6g}" for v in row) for row in grid]
            path.write_text("\n".join(lines) + "\n")
            paths.append(path)
    return paths
