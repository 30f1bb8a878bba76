"""Task-wise mutual lifting between classification and regression features.

Both head branches are split channel-wise by a ratio ``k``: the first
``round(k*C)`` channels of each branch are concatenated and passed through a
shared 3x3 fusion conv, the remaining channels are concatenated and
channel-shuffled across the two branches. Each path is then split evenly and
the halves are re-concatenated (conv half first, then shuffle half), so the
output shapes equal the input shapes but every output branch mixes
information from both input branches.

Degenerate endpoints: k=0 is a pure cross-branch shuffle with no learned
parameters; k=1 routes all channels through the fusion conv.
"""

from __future__ import annotations

import numpy as np

from .engine import Conv2d, Module, Tensor, channel_shuffle, concat, narrow, split
from .engine.flops import FlopReport, count_flops, fpn_level_shapes


def split_channels(channels: int, k: float) -> tuple[int, int]:
    """(conv part, shuffle part) channel counts for one branch."""
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"division ratio k must be in [0, 1], got {k}")
    kc = int(round(k * channels))
    return kc, channels - kc


class LightML(Module):
    def __init__(self, channels: int, k: float, rng: np.random.Generator | None = None):
        self.channels = channels
        self.k = k
        kc, sc = split_channels(channels, k)
        self.conv_channels = kc
        self.shuffle_channels = sc
        self.fuse = (
            Conv2d(2 * kc, 2 * kc, kernel=3, padding=1, rng=rng) if kc > 0 else None
        )

    def __call__(self, f_cls: Tensor, f_reg: Tensor) -> tuple[Tensor, Tensor]:
        if f_cls.shape != f_reg.shape:
            raise ValueError(
                f"branch shapes differ: cls {f_cls.shape} vs reg {f_reg.shape}"
            )
        if f_cls.shape[1] != self.channels:
            raise ValueError(
                f"expected {self.channels} channels, got {f_cls.shape[1]}"
            )
        kc, sc = self.conv_channels, self.shuffle_channels

        conv_cls = conv_reg = None
        if kc > 0:
            fused = self.fuse(concat([narrow(f_cls, 1, 0, kc), narrow(f_reg, 1, 0, kc)], axis=1))
            conv_cls, conv_reg = split(fused, [kc, kc], axis=1)

        shuf_cls = shuf_reg = None
        if sc > 0:
            mixed = channel_shuffle(
                concat([narrow(f_cls, 1, kc, sc), narrow(f_reg, 1, kc, sc)], axis=1),
                groups=2,
            )
            shuf_cls, shuf_reg = split(mixed, [sc, sc], axis=1)

        def assemble(conv_half, shuf_half):
            parts = [p for p in (conv_half, shuf_half) if p is not None]
            return parts[0] if len(parts) == 1 else concat(parts, axis=1)

        return assemble(conv_cls, shuf_cls), assemble(conv_reg, shuf_reg)


def flop_overhead(channels: int, k: float, image_hw: tuple[int, int],
                  strides) -> FlopReport:
    """FLOPs the fusion conv adds across all pyramid levels of an input."""
    kc, _ = split_channels(channels, k)
    report = FlopReport()
    if kc == 0:
        return report
    for stride, (h, w) in zip(strides, fpn_level_shapes(image_hw, strides)):
        level = count_flops(
            [{"kind": "conv", "out_ch": 2 * kc, "kernel": 3, "padding": 1,
              "name": f"light_ml.s{stride}"}],
            (2 * kc, h, w),
        )
        report.merge(level)
    return report
