"""COCO-protocol detection metrics and diagnostic statistics.

``evaluate`` implements greedy score-ordered matching with 101-point
interpolated AP, size buckets at 32^2 and 96^2 pixels, and AR at 1/10/100
detections per image (applied per class). Ground truths outside the area
range under evaluation are ignore regions: detections matched to them, and
unmatched detections outside the range, are discarded rather than counted as
false positives.

The statistics helpers quantify why small instances are hard: per-GT mean
anchor overlaps, positive-region area ratios, and teacher-student cosine
distance maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import AnchorGrid, BBox, pairwise_iou, pairwise_metrics
from .detector.assign import AssignmentResult
from .detector.decode import Detection

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2))
SMALL_AREA = 32.0**2
MEDIUM_AREA = 96.0**2
_AREA_RANGES = {
    "all": (0.0, np.inf),
    "small": (0.0, SMALL_AREA),
    "medium": (SMALL_AREA, MEDIUM_AREA),
    "large": (MEDIUM_AREA, np.inf),
}

CSV_COLUMNS = ("mAP", "AP50", "AP75", "AP_S", "AP_M", "AP_L", "AR_1", "AR_10", "AR_100")


@dataclass
class EvalResult:
    map: float
    ap50: float
    ap75: float
    ap_s: float
    ap_m: float
    ap_l: float
    ar_1: float
    ar_10: float
    ar_100: float
    per_class: dict[int, float] = field(default_factory=dict)

    def row(self) -> tuple[float, ...]:
        return (self.map, self.ap50, self.ap75, self.ap_s, self.ap_m, self.ap_l,
                self.ar_1, self.ar_10, self.ar_100)

    def to_csv(self) -> str:
        header = ",".join(CSV_COLUMNS)
        values = ",".join(f"{v:.6f}" for v in self.row())
        return f"{header}\n{values}\n"

    def summary(self) -> dict:
        d = {k: v for k, v in zip(CSV_COLUMNS, self.row())}
        d["per_class"] = {int(k): float(v) for k, v in self.per_class.items()}
        return d


def _match_image(dets: list, gt_boxes: np.ndarray, gt_ignore: np.ndarray,
                 thr: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching for one image and class at one IoU threshold.

    Returns (matched_gt_index or -1 per det, gt_matched flags). Detections
    prefer the highest-IoU unmatched real GT; only if none qualifies may they
    absorb an ignore GT.
    """
    n_gt = gt_boxes.shape[0]
    det_match = np.full(len(dets), -1, dtype=np.int64)
    gt_taken = np.zeros(n_gt, dtype=bool)
    if n_gt == 0 or not dets:
        return det_match, gt_taken
    d_boxes = np.array([d.box.as_array() for d in dets])
    ious = pairwise_iou(d_boxes, gt_boxes)
    for di in range(len(dets)):
        best, best_iou = -1, thr
        for gi in range(n_gt):
            if gt_taken[gi] or gt_ignore[gi]:
                continue
            if ious[di, gi] >= best_iou and ious[di, gi] > 0:
                if best == -1 or ious[di, gi] > best_iou:
                    best, best_iou = gi, ious[di, gi]
        if best == -1:
            # fall back onto ignore regions so clutter matches do not count
            for gi in range(n_gt):
                if gt_ignore[gi] and not gt_taken[gi] and ious[di, gi] >= thr:
                    best = gi
                    break
        if best >= 0:
            det_match[di] = best
            gt_taken[best] = True
    return det_match, gt_taken


def _ap_101(recall: np.ndarray, precision: np.ndarray) -> float:
    if recall.size == 0:
        return 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, points, side="left")
    vals = np.where(idx < recall.size, env[np.minimum(idx, recall.size - 1)], 0.0)
    return float(vals.mean())


def evaluate(dets_per_image: list[list[Detection]],
             gts_per_image: list[list[tuple[BBox, int]]],
             iou_thresholds=IOU_THRESHOLDS) -> EvalResult:
    classes = sorted({c for gts in gts_per_image for _, c in gts})
    ap = {name: [] for name in _AREA_RANGES}
    ap_by_class: dict[int, list[float]] = {c: [] for c in classes}
    ap50, ap75 = [], []
    recalls = {k: [] for k in (1, 10, 100)}

    for cls in classes:
        cls_dets = _per_class(dets_per_image, cls)
        cls_gts = [[b for b, c in gts if c == cls] for gts in gts_per_image]
        for name, (lo, hi) in _AREA_RANGES.items():
            for thr in iou_thresholds:
                r, p, n_real = _pr_curve(cls_dets, cls_gts, thr, lo, hi, max_dets=100)
                if n_real == 0:
                    continue
                value = _ap_101(r, p)
                ap[name].append(value)
                if name == "all":
                    ap_by_class[cls].append(value)
                    if thr == 0.5:
                        ap50.append(value)
                    elif thr == 0.75:
                        ap75.append(value)
        for k in recalls:
            for thr in iou_thresholds:
                r, _, n_real = _pr_curve(cls_dets, cls_gts, thr, 0.0, np.inf, max_dets=k)
                if n_real:
                    recalls[k].append(float(r[-1]) if r.size else 0.0)

    def _mean(vals):
        return float(np.mean(vals)) if vals else 0.0

    return EvalResult(
        map=_mean(ap["all"]),
        ap50=_mean(ap50),
        ap75=_mean(ap75),
        ap_s=_mean(ap["small"]),
        ap_m=_mean(ap["medium"]),
        ap_l=_mean(ap["large"]),
        ar_1=_mean(recalls[1]),
        ar_10=_mean(recalls[10]),
        ar_100=_mean(recalls[100]),
        per_class={c: _mean(v) for c, v in ap_by_class.items()},
    )


def _per_class(dets_per_image, cls):
    return [[d for d in dets if d.cls == cls] for dets in dets_per_image]


def _pr_curve(cls_dets, cls_gts, thr, area_lo, area_hi, max_dets):
    """Precision/recall arrays over score-ordered detections of one class."""
    records = []  # (score, image, rank, is_tp, discard)
    n_real = 0
    for img, (dets, gts) in enumerate(zip(cls_dets, cls_gts)):
        dets = sorted(dets, key=lambda d: -d.score)[:max_dets]
        gt_boxes = (
            np.array([g.as_array() for g in gts]) if gts else np.zeros((0, 4))
        )
        areas = (
            (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
            if gts else np.zeros(0)
        )
        ignore = ~((areas >= area_lo) & (areas < area_hi))
        n_real += int((~ignore).sum())
        match, _ = _match_image(dets, gt_boxes, ignore, thr)
        for rank, (det, m) in enumerate(zip(dets, match)):
            if m >= 0 and ignore[m]:
                continue  # matched an ignore region
            if m < 0:
                area = det.box.area
                if not (area_lo <= area < area_hi):
                    continue  # unmatched and outside the range under test
            records.append((det.score, img, rank, m >= 0))
    if not records or n_real == 0:
        return np.zeros(0), np.zeros(0), n_real
    records.sort(key=lambda r: (-r[0], r[1], r[2]))
    tp = np.cumsum([r[3] for r in records])
    fp = np.cumsum([not r[3] for r in records])
    recall = tp / n_real
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision, n_real


# -- diagnostic statistics -----------------------------------------------------


@dataclass
class SplitHistogram:
    """Fixed-width histogram of a metric, split at the small-instance area."""

    bin_edges: np.ndarray
    counts_small: np.ndarray
    counts_large: np.ndarray
    values_small: list[float]
    values_large: list[float]

    @property
    def median_small(self) -> float:
        return float(np.median(self.values_small)) if self.values_small else float("nan")

    @property
    def median_large(self) -> float:
        return float(np.median(self.values_large)) if self.values_large else float("nan")

    def to_csv(self) -> str:
        lines = ["bin_lo,bin_hi,count_small,count_large"]
        for lo, hi, cs, cl in zip(self.bin_edges[:-1], self.bin_edges[1:],
                                  self.counts_small, self.counts_large):
            lines.append(f"{lo:.6g},{hi:.6g},{int(cs)},{int(cl)}")
        return "\n".join(lines) + "\n"


def _split_histogram(values, small_flags, lo, hi, width=0.05) -> SplitHistogram:
    edges = np.round(np.arange(lo, hi + width / 2, width), 10)
    vs = [v for v, s in zip(values, small_flags) if s]
    vl = [v for v, s in zip(values, small_flags) if not s]
    cs, _ = np.histogram(vs, bins=edges)
    cl, _ = np.histogram(vl, bins=edges)
    return SplitHistogram(edges, cs, cl, vs, vl)


@dataclass
class OverlapStats:
    iou: SplitHistogram
    giou: SplitHistogram
    diou: SplitHistogram
    skipped: int  # GTs overlapping zero anchor boxes


def anchor_overlap_stats(gts_per_image: list[list[tuple[BBox, int]]],
                         anchors: AnchorGrid,
                         anchor_box_scale: float = 8.0) -> OverlapStats:
    """Per-GT mean IoU/GIoU/DIoU against the predefined anchor boxes.

    Means run over anchors with positive IoU only; boxes that overlap no
    anchor are skipped and counted.
    """
    aboxes = np.concatenate(
        [anchors.anchor_boxes(l, anchor_box_scale) for l in range(anchors.num_levels)]
    )
    means = {"iou": [], "giou": [], "diou": []}
    small_flags = []
    skipped = 0
    for gts in gts_per_image:
        if not gts:
            continue
        g = np.array([b.as_array() for b, _ in gts])
        iou, giou, diou = pairwise_metrics(aboxes, g)
        for j, (box, _) in enumerate(gts):
            pos = iou[:, j] > 0
            if not pos.any():
                skipped += 1
                continue
            means["iou"].append(float(iou[pos, j].mean()))
            means["giou"].append(float(giou[pos, j].mean()))
            means["diou"].append(float(diou[pos, j].mean()))
            small_flags.append(box.area < SMALL_AREA)
    return OverlapStats(
        iou=_split_histogram(means["iou"], small_flags, 0.0, 1.0),
        giou=_split_histogram(means["giou"], small_flags, -1.0, 1.0),
        diou=_split_histogram(means["diou"], small_flags, -1.0, 1.0),
        skipped=skipped,
    )


@dataclass
class AreaRatioStats:
    hist: SplitHistogram
    zero_positive_gts: int


def positive_area_ratio_stats(gts_per_image: list[list[tuple[BBox, int]]],
                              assignments: list[AssignmentResult],
                              anchors: AnchorGrid) -> AreaRatioStats:
    """Histogram of positive-region area / GT area, split by instance size.

    The positive region of a GT is the union of grid cells of anchors
    assigned to it (count x stride^2 per level).
    """
    ratios, small_flags = [], []
    zero_pos = 0
    for gts, asg in zip(gts_per_image, assignments):
        if not gts:
            continue
        areas = np.zeros(len(gts))
        for li, sl in enumerate(asg.level_slices):
            stride = anchors.strides[li]
            idx = asg.gt_index[sl]
            for gi in idx[idx >= 0]:
                areas[gi] += stride * stride
        for gi, (box, _) in enumerate(gts):
            if areas[gi] == 0:
                zero_pos += 1
                continue
            ratios.append(areas[gi] / box.area)
            small_flags.append(box.area < SMALL_AREA)
    upper = max(ratios, default=1.0)
    width = max(0.05, np.ceil(upper / 0.05) * 0.05 / 400)  # cap at 400 bins
    return AreaRatioStats(
        hist=_split_histogram(ratios, small_flags, 0.0,
                              np.ceil(upper / width) * width + width, width),
        zero_positive_gts=zero_pos,
    )


def cosine_distance_map(teacher_map: np.ndarray, student_map: np.ndarray
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Per-position 1 - cosine similarity over channels of (C, H, W) maps.

    Positions where either vector is all-zero report distance 1 and are
    flagged in the second return value.
    """
    t = np.asarray(teacher_map, dtype=np.float64)
    s = np.asarray(student_map, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"map shapes differ: {t.shape} vs {s.shape}")
    dot = (t * s).sum(axis=0)
    nt = np.sqrt((t * t).sum(axis=0))
    ns = np.sqrt((s * s).sum(axis=0))
    zero = (nt == 0) | (ns == 0)
    denom = np.where(zero, 1.0, nt * ns)
    dist = 1.0 - dot / denom
    dist = np.where(zero, 1.0, dist)
    return np.clip(dist, 0.0, 2.0), zero


def raster_csv(arr: np.ndarray) -> str:
    """(H, W) array as plot-ready CSV rows."""
    return "\n".join(",".join(f"{v:.6g}" for v in row) for row in np.asarray(arr)) + "\n"
