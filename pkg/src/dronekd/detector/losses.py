"""Detection losses: quality focal (classification), distribution focal and
GIoU (regression). Regression terms average over positive anchors only."""

from __future__ import annotations

import numpy as np

from ..boxes import pairwise_iou
from ..engine import (
    Tensor,
    abs_,
    gather,
    log_softmax,
    narrow,
    relu,
    sigmoid,
    softmax,
    softplus,
    take,
)
from .assign import AssignmentResult
from .model import DetectionOutput

EPS = 1e-7

# Loss weights follow the usual generalized-focal recipe.
W_QFL = 1.0
W_GIOU = 2.0
W_DFL = 0.25


def _binary_ce_with_logits(x: Tensor, y: np.ndarray) -> Tensor:
    yt = Tensor(y.astype(x.data.dtype))
    return relu(x) - x * yt + softplus(-abs_(x))


def _expected_offsets_graph(reg_pos: Tensor, num_bins: int) -> Tensor:
    """(P, 4, D) logits -> (P, 4) expected bin offsets, differentiable."""
    probs = softmax(reg_pos, axis=-1)
    bins = Tensor(np.arange(num_bins, dtype=probs.data.dtype))
    return (probs * bins).sum(axis=-1)


def _giou_graph(pred: list[Tensor], gt: np.ndarray) -> Tensor:
    """GIoU between per-corner prediction tensors and constant GT corners."""
    px1, py1, px2, py2 = pred
    gx1 = Tensor(gt[:, 0].astype(px1.data.dtype))
    gy1 = Tensor(gt[:, 1].astype(px1.data.dtype))
    gx2 = Tensor(gt[:, 2].astype(px1.data.dtype))
    gy2 = Tensor(gt[:, 3].astype(px1.data.dtype))
    from ..engine import maximum, minimum

    iw = relu(minimum(px2, gx2) - maximum(px1, gx1))
    ih = relu(minimum(py2, gy2) - maximum(py1, gy1))
    inter = iw * ih
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter + EPS
    iou = inter / union
    cw = maximum(px2, gx2) - minimum(px1, gx1)
    ch = maximum(py2, gy2) - minimum(py1, gy1)
    c_area = cw * ch + EPS
    return iou - (c_area - union) / c_area


def detection_loss(out: DetectionOutput, assignments: list[AssignmentResult]
                   ) -> tuple[Tensor, Tensor, Tensor]:
    """(cls_loss, reg_loss, dfl_loss) for a batch.

    ``assignments`` holds one result per image in the batch. With zero
    positive anchors the regression losses are exactly zero.
    """
    if len(assignments) != out.batch_size:
        raise ValueError(
            f"{len(assignments)} assignments for batch of {out.batch_size}"
        )
    anchors = out.anchors()
    num_bins = out.levels[0].reg_map.shape[1] // 4

    qfl_terms: list[Tensor] = []
    giou_terms: list[Tensor] = []
    dfl_terms: list[Tensor] = []
    total_pos = 0
    quality_sum = 0.0

    for li, level in enumerate(out.levels):
        n_anchor = anchors.num_anchors(li)
        pts = anchors.points(li)
        cls_logits = level.cls_flat()            # (N*HW, C)
        reg_logits = level.reg_flat(num_bins)    # (N*HW, 4, D)
        num_classes = cls_logits.shape[1]

        rows, tgt_bins, gt_boxes, gt_pts, gt_cls = [], [], [], [], []
        for img, asg in enumerate(assignments):
            sl = asg.level_slices[li]
            fg = np.where(asg.gt_index[sl] >= 0)[0]
            if fg.size == 0:
                continue
            rows.append(img * n_anchor + fg)
            tgt_bins.append(asg.targets[sl][fg])
            gt_boxes.append(asg.gt_boxes[asg.gt_index[sl][fg]])
            gt_cls.append(asg.gt_classes[asg.gt_index[sl][fg]])
            gt_pts.append(pts[fg])
        score_target = np.zeros((out.batch_size * n_anchor, num_classes), dtype=np.float32)

        if rows:
            rows_arr = np.concatenate(rows)
            tgt_arr = np.concatenate(tgt_bins).astype(np.float32)
            gt_arr = np.concatenate(gt_boxes)
            pts_arr = np.concatenate(gt_pts)
            total_pos += rows_arr.size

            reg_pos = take(reg_logits, rows_arr, axis=0)   # (P, 4, D)
            offs = _expected_offsets_graph(reg_pos, num_bins) * float(level.stride)
            ol, ot, orr, ob = [narrow(offs, 1, i, 1).reshape(-1) for i in range(4)]
            px = Tensor(pts_arr[:, 0].astype(np.float32))
            py = Tensor(pts_arr[:, 1].astype(np.float32))
            corners = [px - ol, py - ot, px + orr, py + ob]
            giou = _giou_graph(corners, gt_arr)

            # Quality targets: IoU of the (detached) decoded box vs its GT.
            # Regression terms are quality-weighted and later normalized by
            # the summed quality, which keeps early gradients strong while
            # the scores bootstrap.
            pred_np = np.stack([c.data for c in corners], axis=1).astype(np.float64)
            quality = np.clip(
                pairwise_iou(pred_np, gt_arr).diagonal(), 0.0, 1.0
            ).astype(np.float32)
            score_target[rows_arr, np.concatenate(gt_cls)] = quality
            qw = Tensor(quality)
            quality_sum += float(quality.sum())
            giou_terms.append(((1.0 - giou) * qw).sum())

            logp = log_softmax(reg_pos, axis=-1)
            left = np.floor(tgt_arr).astype(np.intp)
            right = left + 1
            wl = Tensor((right - tgt_arr).astype(np.float32))
            wr = Tensor((tgt_arr - left).astype(np.float32))
            lp_l = gather(logp, left[..., None], axis=-1).reshape(left.shape)
            lp_r = gather(logp, right[..., None], axis=-1).reshape(left.shape)
            dfl = -(wl * lp_l + wr * lp_r)
            dfl_terms.append((dfl * qw.reshape(-1, 1)).sum())

        bce = _binary_ce_with_logits(cls_logits, score_target)
        focal = abs_(Tensor(score_target) - sigmoid(cls_logits)) ** 2.0
        qfl_terms.append((bce * focal).sum())

    cls_loss = _sum(qfl_terms) * (W_QFL / float(max(total_pos, 1)))
    if total_pos == 0:
        zero = Tensor(np.float32(0.0))
        return cls_loss, zero, zero
    qnorm = max(quality_sum, 1.0)
    reg_loss = _sum(giou_terms) * (W_GIOU / qnorm)
    dfl_loss = _sum(dfl_terms) * (W_DFL / (4.0 * qnorm))
    return cls_loss, reg_loss, dfl_loss


def _sum(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total
