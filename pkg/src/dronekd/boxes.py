"""Axis-aligned box arithmetic: offsets, centerness, overlap metrics, and
decoding of per-side regression distributions.

Scalar entry points operate on ``BBox``/``PointOffsets`` values; the ``*_array``
variants are the vectorized float64 equivalents used on dense anchor grids and
are written with the exact same operation order, so scalar recomputation of a
vectorized result is bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Box in corner form, image-pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ValueError(f"box coordinates must be finite: {self}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"box corners out of order: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    @property
    def diagonal(self) -> float:
        return math.sqrt(self.width * self.width + self.height * self.height)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "BBox":
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


@dataclass(frozen=True)
class PointOffsets:
    """Distances from a point to a box's four sides; negative means outside."""

    l: float
    t: float
    r: float
    b: float

    @property
    def inside(self) -> bool:
        # Boundary points (offset exactly 0) count as inside.
        return self.l >= 0 and self.t >= 0 and self.r >= 0 and self.b >= 0


def offsets(point: tuple[float, float], box: BBox) -> PointOffsets:
    x, y = point
    return PointOffsets(x - box.x1, y - box.y1, box.x2 - x, box.y2 - y)


def centerness(o: PointOffsets) -> float:
    """sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)); 1 at the exact center.

    Defined for points inside the box only. Degenerate sides (both offsets 0)
    yield 0, the continuous boundary limit.
    """
    if not o.inside:
        raise ValueError(f"centerness undefined outside the box: {o}")
    mx_lr = max(o.l, o.r)
    mx_tb = max(o.t, o.b)
    if mx_lr == 0.0 or mx_tb == 0.0:
        return 0.0
    return math.sqrt((min(o.l, o.r) / mx_lr) * (min(o.t, o.b) / mx_tb))


def overlap_metrics(a: BBox, b: BBox) -> tuple[float, float, float]:
    """(IoU, GIoU, DIoU). Zero-area boxes overlap nothing unless the two
    boxes are identical degenerate boxes, which compare as (1, 1, 1)."""
    if a == b:
        return 1.0, 1.0, 1.0
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    iou = inter / union if union > 0 else 0.0
    cw = max(a.x2, b.x2) - min(a.x1, b.x1)
    ch = max(a.y2, b.y2) - min(a.y1, b.y1)
    c_area = cw * ch
    giou = iou - (c_area - union) / c_area if c_area > 0 else iou
    ax, ay = a.center
    bx, by = b.center
    d2 = (ax - bx) * (ax - bx) + (ay - by) * (ay - by)
    c2 = cw * cw + ch * ch
    diou = iou - d2 / c2 if c2 > 0 else iou
    return iou, giou, diou


def decode_distribution(reg_logits, anchor: tuple[float, float], stride: float) -> BBox:
    """Decode 4 x D per-side bin logits into a box around ``anchor``.

    Each side's distribution is softmaxed and reduced to its expected bin
    index, scaled by ``stride``. Offsets are clipped at 0 by construction
    (bin indices are nonnegative), so the anchor always lies in the box.
    """
    logits = np.asarray(reg_logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != 4 or logits.shape[1] < 2:
        raise ValueError(f"expected (4, D>=2) regression logits, got {logits.shape}")
    off = _expected_offsets(logits[None], stride)[0]
    x, y = anchor
    return BBox(x - off[0], y - off[1], x + off[2], y + off[3])


def _expected_offsets(logits: np.ndarray, stride: float) -> np.ndarray:
    """(n, 4, D) logits -> (n, 4) pixel offsets via softmax expectation."""
    d = logits.shape[-1]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    return (probs * np.arange(d, dtype=np.float64)).sum(axis=-1) * stride


def decode_distribution_array(reg_logits: np.ndarray, points: np.ndarray,
                              stride: float) -> np.ndarray:
    """Vectorized decode: (n, 4, D) logits at (n, 2) points -> (n, 4) boxes."""
    off = _expected_offsets(np.asarray(reg_logits, dtype=np.float64), stride)
    pts = np.asarray(points, dtype=np.float64)
    return np.stack(
        [pts[:, 0] - off[:, 0], pts[:, 1] - off[:, 1],
         pts[:, 0] + off[:, 2], pts[:, 1] + off[:, 3]],
        axis=1,
    )


def offsets_array(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Pairwise side offsets: (n, 2) points x (m, 4) boxes -> (n, m, 4)."""
    px = points[:, None, 0]
    py = points[:, None, 1]
    return np.stack(
        [px - boxes[None, :, 0], py - boxes[None, :, 1],
         boxes[None, :, 2] - px, boxes[None, :, 3] - py],
        axis=-1,
    )


def centerness_array(offs: np.ndarray) -> np.ndarray:
    """Centerness of (..., 4) l/t/r/b offsets; caller filters to inside points.

    Entries with negative offsets (outside points) produce garbage the caller
    must mask out; the product is clamped at zero only so sqrt stays quiet.
    """
    l, t, r, b = offs[..., 0], offs[..., 1], offs[..., 2], offs[..., 3]
    mx_lr = np.maximum(l, r)
    mx_tb = np.maximum(t, b)
    ratio = np.where(mx_lr > 0, np.minimum(l, r) / np.where(mx_lr > 0, mx_lr, 1.0), 0.0)
    ratio_tb = np.where(mx_tb > 0, np.minimum(t, b) / np.where(mx_tb > 0, mx_tb, 1.0), 0.0)
    return np.sqrt(np.maximum(ratio * ratio_tb, 0.0))


def pairwise_metrics(a: np.ndarray, b: np.ndarray):
    """IoU / GIoU / DIoU matrices for (n, 4) x (m, 4) corner boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax1, ay1, ax2, ay2 = (a[:, None, i] for i in range(4))
    bx1, by1, bx2, by2 = (b[None, :, i] for i in range(4))
    iw = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    ih = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    cw = np.maximum(ax2, bx2) - np.minimum(ax1, bx1)
    ch = np.maximum(ay2, by2) - np.minimum(ay1, by1)
    c_area = cw * ch
    giou = np.where(c_area > 0, iou - (c_area - union) / np.where(c_area > 0, c_area, 1.0), iou)
    dx = (ax1 + ax2) / 2.0 - (bx1 + bx2) / 2.0
    dy = (ay1 + ay2) / 2.0 - (by1 + by2) / 2.0
    d2 = dx * dx + dy * dy
    c2 = cw * cw + ch * ch
    diou = np.where(c2 > 0, iou - d2 / np.where(c2 > 0, c2, 1.0), iou)
    return iou, giou, diou


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return pairwise_metrics(a, b)[0]


class AnchorGrid:
    """Per-level anchor points (grid-cell centers) for a pyramid of strides."""

    def __init__(self, image_hw: tuple[int, int], strides):
        self.image_hw = tuple(image_hw)
        self.strides = tuple(strides)
        if any(s2 <= s1 for s1, s2 in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must be strictly increasing: {strides}")
        h, w = self.image_hw
        self.level_hw: list[tuple[int, int]] = []
        self._points: list[np.ndarray] = []
        for s in self.strides:
            lh, lw = math.ceil(h / s), math.ceil(w / s)
            ys, xs = np.mgrid[0:lh, 0:lw]
            pts = np.stack(
                [(xs.reshape(-1) + 0.5) * s, (ys.reshape(-1) + 0.5) * s], axis=1
            ).astype(np.float64)
            self.level_hw.append((lh, lw))
            self._points.append(pts)

    @property
    def num_levels(self) -> int:
        return len(self.strides)

    def points(self, level: int) -> np.ndarray:
        """(n, 2) anchor coordinates in raster order for one level."""
        return self._points[level]

    def num_anchors(self, level: int) -> int:
        return self._points[level].shape[0]

    def anchor_boxes(self, level: int, scale: float) -> np.ndarray:
        """Square boxes of side ``scale * stride`` centered on the points."""
        half = scale * self.strides[level] / 2.0
        pts = self._points[level]
        return np.stack(
            [pts[:, 0] - half, pts[:, 1] - half, pts[:, 0] + half, pts[:, 1] + half],
            axis=1,
        )
