"""Deterministic synthetic aerial scenes.

Scenes mimic the two properties that make drone-style imagery hard: the
annotated foreground covers only a small fraction of the image, and the
instances are small shapes sitting on a cluttered background. Clutter shares
the object palette but never their filled compact silhouettes, so texture
alone cannot separate foreground from background.

Generation is a pure function of (spec, index): every image draws from its
own generator seeded by the pair, so datasets can be produced in any order
or in parallel and still agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import BBox

# Base palette, cycled when num_classes exceeds it. Distractors reuse these.
_PALETTE = [
    (0.90, 0.25, 0.20),
    (0.20, 0.85, 0.30),
    (0.25, 0.45, 0.95),
    (0.95, 0.80, 0.20),
    (0.80, 0.30, 0.85),
    (0.20, 0.85, 0.85),
]


@dataclass
class SceneSpec:
    image_size: int = 96
    num_objects: tuple[int, int] = (3, 6)     # inclusive range per image
    size_range: tuple[int, int] = (4, 12)     # object side lengths in pixels
    max_foreground_frac: float = 0.05
    clutter: float = 0.6                      # background texture amplitude
    num_classes: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.size_range[0] < 2:
            raise ValueError(f"minimum object size is 2 px, got {self.size_range[0]}")
        if not 0.0 < self.max_foreground_frac <= 1.0:
            raise ValueError(
                f"foreground fraction must be in (0, 1], got {self.max_foreground_frac}"
            )
        if self.num_objects[0] > self.num_objects[1]:
            raise ValueError(f"bad object count range {self.num_objects}")


@dataclass
class Dataset:
    annotations: list[list[tuple[BBox, int]]]
    num_classes: int
    image_sizes: list[tuple[int, int]]        # (h, w) per image
    images: list[np.ndarray] | None = None    # (3, h, w) float32 in [0, 1]
    split: str = "train"
    shortfall: int = 0  # objects that did not fit the foreground budget
    category_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.category_names:
            self.category_names = [f"class{c}" for c in range(self.num_classes)]
        self.validate()

    def __len__(self) -> int:
        return len(self.annotations)

    def validate(self) -> None:
        for i, (anns, (h, w)) in enumerate(zip(self.annotations, self.image_sizes)):
            for box, cls in anns:
                if not (0 <= box.x1 and box.x2 <= w and 0 <= box.y1 and box.y2 <= h):
                    raise ValueError(f"image {i}: box {box} outside {w}x{h} bounds")
                if box.width < 1.0 or box.height < 1.0:
                    raise ValueError(f"image {i}: box {box} smaller than 1 px")
                if not 0 <= cls < self.num_classes:
                    raise ValueError(f"image {i}: class {cls} out of range")

    def foreground_fraction(self) -> float:
        total = sum(h * w for h, w in self.image_sizes)
        fg = sum(b.area for anns in self.annotations for b, _ in anns)
        return fg / total


def _shape_mask(kind: int, h: int, w: int) -> np.ndarray:
    """Filled silhouette for an object class, h x w boolean."""
    ys, xs = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ry, rx = max(h / 2.0, 1e-6), max(w / 2.0, 1e-6)
    if kind == 0:  # square
        return np.ones((h, w), dtype=bool)
    if kind == 1:  # disk
        return ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
    if kind == 2:  # diamond
        return np.abs(ys - cy) / ry + np.abs(xs - cx) / rx <= 1.0
    # plus sign
    bar_h = max(h // 3, 1)
    bar_w = max(w // 3, 1)
    mask = np.zeros((h, w), dtype=bool)
    mask[(h - bar_h) // 2 : (h - bar_h) // 2 + bar_h, :] = True
    mask[:, (w - bar_w) // 2 : (w - bar_w) // 2 + bar_w] = True
    return mask


def _smooth_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.random((3, size // 8 + 1, size // 8 + 1)).astype(np.float32)
    up = np.repeat(np.repeat(coarse, 8, axis=1), 8, axis=2)[:, :size, :size]
    # two box-blur passes soften the block edges
    for _ in range(2):
        up = (up + np.roll(up, 1, axis=1) + np.roll(up, -1, axis=1)
              + np.roll(up, 1, axis=2) + np.roll(up, -1, axis=2)) / 5.0
    return up


def _draw_distractors(img: np.ndarray, rng: np.random.Generator,
                      spec: SceneSpec) -> None:
    """Unannotated clutter: outlines and bars in the object palette."""
    size = spec.image_size
    count = int(rng.integers(6, 14))
    for _ in range(count):
        color = np.array(_PALETTE[int(rng.integers(0, spec.num_classes)) % len(_PALETTE)],
                         dtype=np.float32)
        kind = int(rng.integers(0, 3))
        w = int(rng.integers(6, 20))
        h = int(rng.integers(6, 20))
        x = int(rng.integers(0, max(size - w, 1)))
        y = int(rng.integers(0, max(size - h, 1)))
        strength = 0.4 + 0.5 * float(rng.random())
        if kind == 0:  # hollow rectangle
            img[:, y, x : x + w] = img[:, y, x : x + w] * (1 - strength) + color[:, None] * strength
            img[:, min(y + h - 1, size - 1), x : x + w] = color[:, None]
            img[:, y : y + h, x] = color[:, None]
            img[:, y : y + h, min(x + w - 1, size - 1)] = color[:, None]
        elif kind == 1:  # thin bar
            t = max(1, w // 8)
            img[:, y : y + t, x : x + w] = color[:, None, None]
        else:  # ring
            ys, xs = np.mgrid[0:h, 0:w]
            cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
            r2 = ((ys - cy) / (h / 2.0)) ** 2 + ((xs - cx) / (w / 2.0)) ** 2
            ring = (r2 <= 1.0) & (r2 >= 0.45)
            region = img[:, y : y + h, x : x + w]
            region[:, ring] = color[:, None]


def generate_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, list[tuple[BBox, int]]]:
    """Render one scene; deterministic in (spec.seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    img = 0.35 + spec.clutter * 0.5 * (_smooth_noise(rng, size) - 0.5)
    img = img.astype(np.float32)
    if spec.clutter > 0:
        _draw_distractors(img, rng, spec)
        img += (spec.clutter * 0.06 * rng.standard_normal(img.shape)).astype(np.float32)
    img = np.clip(img, 0.0, 1.0)

    budget = spec.max_foreground_frac * size * size
    used = 0.0
    requested = int(rng.integers(spec.num_objects[0], spec.num_objects[1] + 1))
    placed: list[tuple[BBox, int]] = []
    for _ in range(requested):
        done = False
        for _attempt in range(30):
            w = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            h = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            if used + w * h > budget:
                continue
            x = int(rng.integers(1, max(size - w - 1, 2)))
            y = int(rng.integers(1, max(size - h - 1, 2)))
            box = BBox(float(x), float(y), float(x + w), float(y + h))
            # keep instances separated; heavy overlap makes GT ambiguous
            if any(_boxes_touch(box, other, margin=2.0) for other, _ in placed):
                continue
            cls = int(rng.integers(0, spec.num_classes))
            color = np.array(_PALETTE[cls % len(_PALETTE)], dtype=np.float32)
            color = np.clip(color + 0.08 * rng.standard_normal(3).astype(np.float32), 0, 1)
            mask = _shape_mask(cls % 4, h, w)
            region = img[:, y : y + h, x : x + w]
            region[:, mask] = color[:, None]
            placed.append((box, cls))
            used += w * h
            done = True
            break
        if not done:
            break
    return img, placed


def _boxes_touch(a: BBox, b: BBox, margin: float) -> bool:
    return not (a.x2 + margin <= b.x1 or b.x2 + margin <= a.x1
                or a.y2 + margin <= b.y1 or b.y2 + margin <= a.y1)


def generate_dataset(spec: SceneSpec, count: int, split: str = "train",
                     start_index: int = 0) -> Dataset:
    images, annotations, sizes = [], [], []
    shortfall = 0
    lo = spec.num_objects[0]
    for i in range(start_index, start_index + count):
        img, anns = generate_scene(spec, i)
        images.append(img)
        annotations.append(anns)
        sizes.append((spec.image_size, spec.image_size))
        if len(anns) < lo:
            shortfall += lo - len(anns)
    return Dataset(
        annotations=annotations,
        num_classes=spec.num_classes,
        image_sizes=sizes,
        images=images,
        split=split,
        shortfall=shortfall,
    )


def write_ppm(image: np.ndarray, path) -> None:
    """Dump a (3, H, W) float image in [0, 1] as a binary P6 pixel map."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    h, w = arr.shape[1], arr.shape[2]
    data = (arr.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())
    return None


def pad_to_stride(image: np.ndarray, stride: int) -> np.ndarray:
    """Zero-pad bottom/right so H and W divide by ``stride``."""
    _, h, w = image.shape
    ph = (stride - h % stride) % stride
    pw = (stride - w % stride) % stride
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw)))
