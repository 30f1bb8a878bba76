"""Center-sampling label assignment.

An anchor point is positive for a ground-truth box when it lies within
``center_radius * stride`` (Euclidean) of the box center and the box's longer
side falls inside the level's scale range. Ambiguous anchors go to the
smallest-area candidate. Regression targets are side offsets in stride units,
clipped into the representable bin range (tiny objects legitimately produce
positives outside the box under center sampling).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..boxes import AnchorGrid, BBox
from .config import ModelConfig


@dataclass
class AssignmentResult:
    # All arrays are flat over levels, raster order inside each level.
    level_slices: list[slice]
    gt_index: np.ndarray      # (n,) int, -1 for background
    targets: np.ndarray       # (n, 4) float32 l/t/r/b in stride units (clipped)
    i_main: np.ndarray        # (n,) float64, 0 for background
    gt_boxes: np.ndarray      # (num_gt, 4) float64
    gt_classes: np.ndarray    # (num_gt,) int

    @property
    def fg_mask(self) -> np.ndarray:
        return self.gt_index >= 0

    @property
    def num_pos(self) -> int:
        return int(self.fg_mask.sum())


def assign_targets(anchors: AnchorGrid, gts: list[tuple[BBox, int]],
                   cfg: ModelConfig) -> AssignmentResult:
    n_total = sum(anchors.num_anchors(l) for l in range(anchors.num_levels))
    gt_index = np.full(n_total, -1, dtype=np.int64)
    targets = np.zeros((n_total, 4), dtype=np.float32)
    i_main = np.zeros(n_total, dtype=np.float64)
    level_slices = []

    gt_boxes = np.array([g[0].as_array() for g in gts], dtype=np.float64).reshape(-1, 4)
    gt_classes = np.array([g[1] for g in gts], dtype=np.int64)
    areas = (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
    max_side = np.maximum(gt_boxes[:, 2] - gt_boxes[:, 0], gt_boxes[:, 3] - gt_boxes[:, 1])
    centers = np.stack(
        [(gt_boxes[:, 0] + gt_boxes[:, 2]) / 2.0, (gt_boxes[:, 1] + gt_boxes[:, 3]) / 2.0],
        axis=1,
    )

    start = 0
    bin_max = cfg.num_bins - 1 - 0.01
    for level in range(anchors.num_levels):
        pts = anchors.points(level)
        n = pts.shape[0]
        sl = slice(start, start + n)
        level_slices.append(sl)
        start += n
        if len(gts) == 0:
            continue
        stride = anchors.strides[level]
        lo, hi = cfg.scale_ranges[level]
        in_range = (max_side >= lo) & (max_side < hi)
        if not in_range.any():
            continue
        radius = cfg.center_radius * stride
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(-1)  # (n, num_gt)
        candidate = (d2 <= radius * radius) & in_range[None, :]
        # Ties resolve to the smallest-area ground truth.
        cost = np.where(candidate, areas[None, :], np.inf)
        best = cost.argmin(axis=1)
        has = np.isfinite(cost[np.arange(n), best])
        idx = np.where(has)[0]
        if idx.size == 0:
            continue
        chosen = best[idx]
        gt_index[sl][idx] = chosen
        boxes = gt_boxes[chosen]
        off = np.stack(
            [pts[idx, 0] - boxes[:, 0], pts[idx, 1] - boxes[:, 1],
             boxes[:, 2] - pts[idx, 0], boxes[:, 3] - pts[idx, 1]],
            axis=1,
        ) / stride
        targets[sl][idx] = np.clip(off, 0.0, bin_max).astype(np.float32)
        if cfg.quality_i_main:
            sigma = radius / 2.0
            i_main[sl][idx] = np.exp(-d2[idx, chosen] / (2.0 * sigma * sigma))
        else:
            i_main[sl][idx] = 1.0

    return AssignmentResult(
        level_slices=level_slices,
        gt_index=gt_index,
        targets=targets,
        i_main=i_main,
        gt_boxes=gt_boxes,
        gt_classes=gt_classes,
    )
