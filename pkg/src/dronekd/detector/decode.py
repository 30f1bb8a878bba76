"""Detection decoding: score thresholding, per-class greedy NMS, clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..boxes import BBox, decode_distribution_array, pairwise_iou
from .model import DetectionOutput


@dataclass
class Detection:
    box: BBox
    cls: int
    score: float


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy NMS on pre-ordered candidates; returns surviving indices.

    Callers pass candidates sorted by descending score with ties already
    broken (lower anchor index first), so the survivor set is deterministic.
    """
    keep: list[int] = []
    alive = np.ones(len(boxes), dtype=bool)
    for i in range(len(boxes)):
        if not alive[i]:
            continue
        keep.append(i)
        if i + 1 < len(boxes):
            rest = np.where(alive[i + 1 :])[0] + i + 1
            if rest.size:
                ious = pairwise_iou(boxes[i : i + 1], boxes[rest])[0]
                alive[rest[ious > iou_thresh]] = False
    return keep


def decode_batch(out: DetectionOutput, score_thresh: float, nms_iou: float,
                 max_dets: int = 100) -> list[list[Detection]]:
    if not (0.0 <= score_thresh <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValueError(
            f"thresholds must be in [0, 1]: score={score_thresh}, nms={nms_iou}"
        )
    anchors = out.anchors()
    h, w = out.image_hw
    num_bins = out.levels[0].reg_map.shape[1] // 4

    results: list[list[Detection]] = []
    for img in range(out.batch_size):
        cand_boxes, cand_scores, cand_cls, cand_order = [], [], [], []
        order_base = 0
        for li, level in enumerate(out.levels):
            pts = anchors.points(li)
            n = pts.shape[0]
            cls_map = level.cls_map.data[img]
            c = cls_map.shape[0]
            scores = _sigmoid(cls_map.transpose(1, 2, 0).reshape(n, c))
            reg = level.reg_map.data[img].transpose(1, 2, 0).reshape(n, 4, num_bins)
            aidx, cidx = np.where(scores > score_thresh)
            if aidx.size:
                boxes = decode_distribution_array(reg[aidx], pts[aidx], level.stride)
                boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, w)
                boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, h)
                cand_boxes.append(boxes)
                cand_scores.append(scores[aidx, cidx])
                cand_cls.append(cidx)
                cand_order.append(order_base + aidx)
            order_base += n

        if not cand_boxes:
            results.append([])
            continue
        boxes = np.concatenate(cand_boxes)
        scores = np.concatenate(cand_scores)
        classes = np.concatenate(cand_cls)
        order_idx = np.concatenate(cand_order)

        picked: list[int] = []
        for cls in np.unique(classes):
            sel = np.where(classes == cls)[0]
            # Descending score; equal scores resolve to the lower anchor index.
            rank = np.lexsort((order_idx[sel], -scores[sel]))
            sel = sel[rank]
            keep = nms(boxes[sel], scores[sel], nms_iou)
            picked.extend(sel[k] for k in keep)

        picked.sort(key=lambda i: (-scores[i], order_idx[i]))
        picked = picked[:max_dets]
        results.append(
            [Detection(BBox.from_array(boxes[i]), int(classes[i]), float(scores[i]))
             for i in picked]
        )
    return results


def decode_detections(out: DetectionOutput, score_thresh: float, nms_iou: float,
                      max_dets: int = 100) -> list[Detection]:
    """Single-image decode; the forward contract is one image per graph."""
    if out.batch_size != 1:
        raise ValueError(f"decode_detections expects batch 1, got {out.batch_size}")
    return decode_batch(out, score_thresh, nms_iou, max_dets)[0]
