"""Dense detector: small conv backbone, two-level FPN, dual-branch head.

The head predicts per-anchor class logits (C channels, sigmoid scored) and a
distribution over ``num_bins`` offsets per box side (4*D channels), shared
across pyramid levels. When enabled, the mutual-lifting module sits after the
last shared subnet conv, immediately before the prediction convs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..boxes import AnchorGrid
from ..engine import Conv2d, Module, Tensor, conv2d, relu, upsample2x
from ..engine.flops import FlopReport, count_flops
from ..lightml import LightML, flop_overhead
from .config import ModelConfig


@dataclass
class LevelOutput:
    stride: int
    cls_map: Tensor  # (N, C, H, W)
    reg_map: Tensor  # (N, 4*D, H, W)

    @property
    def hw(self) -> tuple[int, int]:
        return self.cls_map.shape[2], self.cls_map.shape[3]

    def cls_flat(self) -> Tensor:
        """(N*H*W, C); anchors in raster order, images stacked."""
        n, c, h, w = self.cls_map.shape
        return self.cls_map.transpose(0, 2, 3, 1).reshape(n * h * w, c)

    def reg_flat(self, num_bins: int) -> Tensor:
        """(N*H*W, 4, D) per-side bin logits."""
        n, c, h, w = self.reg_map.shape
        return self.reg_map.transpose(0, 2, 3, 1).reshape(n * h * w, 4, num_bins)


@dataclass
class DetectionOutput:
    levels: list[LevelOutput]
    image_hw: tuple[int, int]
    batch_size: int

    def anchors(self) -> AnchorGrid:
        return AnchorGrid(self.image_hw, tuple(l.stride for l in self.levels))


class GFLDetector(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        widths = cfg.backbone_widths

        # Backbone: one stride-2 conv per downsample plus depth-1 refiners.
        self.backbone = []
        in_ch = 3
        for w in widths:
            stage = [Conv2d(in_ch, w, kernel=3, stride=2, padding=1, rng=rng)]
            for _ in range(cfg.backbone_depth - 1):
                stage.append(Conv2d(w, w, kernel=3, padding=1, rng=rng))
            self.backbone.append(stage)
            in_ch = w

        # FPN laterals: 1x1 to head width, top-down nearest upsampling.
        self._level_stage = [int(math.log2(s)) - 1 for s in cfg.strides]
        self.laterals = [
            Conv2d(widths[i], cfg.head_channels, kernel=1, rng=rng)
            for i in self._level_stage
        ]

        ch = cfg.head_channels
        self.cls_convs = [Conv2d(ch, ch, kernel=3, padding=1, rng=rng)
                          for _ in range(cfg.head_convs)]
        self.reg_convs = [Conv2d(ch, ch, kernel=3, padding=1, rng=rng)
                          for _ in range(cfg.head_convs)]
        self.light_ml = LightML(ch, cfg.light_ml_k, rng=rng) if cfg.light_ml else None
        self.cls_pred = Conv2d(ch, cfg.num_classes, kernel=3, padding=1, rng=rng)
        self.reg_pred = Conv2d(ch, 4 * cfg.num_bins, kernel=3, padding=1, rng=rng)
        # Bias so initial foreground scores sit near prior_prob.
        self.cls_pred.bias.data[:] = -math.log((1 - cfg.prior_prob) / cfg.prior_prob)

    def forward(self, images: Tensor) -> DetectionOutput:
        """Run the detector on (N, 3, H, W) images.

        H and W must divide by the largest stride; the error message names
        the padding that would fix an offending input.
        """
        n, c, h, w = images.shape
        if c != 3:
            raise ValueError(f"expected 3 input channels, got {c}")
        smax = max(self.cfg.strides)
        if h % smax or w % smax:
            raise ValueError(
                f"input {h}x{w} not divisible by max stride {smax}; "
                f"pad to {math.ceil(h / smax) * smax}x{math.ceil(w / smax) * smax}"
            )

        feats = []
        x = images
        for stage in self.backbone:
            for conv in stage:
                x = relu(conv(x))
            feats.append(x)

        # Top-down pathway over the configured levels, deepest first.
        laterals = [
            lat(feats[i]) for lat, i in zip(self.laterals, self._level_stage)
        ]
        for i in range(len(laterals) - 2, -1, -1):
            laterals[i] = laterals[i] + upsample2x(laterals[i + 1])

        levels = []
        for stride, feat in zip(self.cfg.strides, laterals):
            f_cls = feat
            f_reg = feat
            for conv_c, conv_r in zip(self.cls_convs, self.reg_convs):
                f_cls = relu(conv_c(f_cls))
                f_reg = relu(conv_r(f_reg))
            if self.light_ml is not None:
                f_cls, f_reg = self.light_ml(f_cls, f_reg)
            levels.append(
                LevelOutput(stride, self.cls_pred(f_cls), self.reg_pred(f_reg))
            )
        return DetectionOutput(levels=levels, image_hw=(h, w), batch_size=n)

    __call__ = forward

    def flop_report(self, image_hw: tuple[int, int]) -> FlopReport:
        """Analytic MAC count of a single-image forward pass."""
        cfg = self.cfg
        h, w = image_hw
        report = FlopReport()
        chain = []
        in_ch = 3
        for si, stage in enumerate(self.backbone):
            for ci, conv in enumerate(stage):
                chain.append({
                    "kind": "conv", "out_ch": conv.out_channels,
                    "kernel": conv.kernel_size, "stride": conv.stride,
                    "padding": conv.padding, "name": f"backbone.{si}.{ci}",
                })
        report.merge(count_flops(chain, (in_ch, h, w)))

        for stride, lat in zip(cfg.strides, self.laterals):
            lh, lw = h // stride, w // stride
            level_chain = [{
                "kind": "conv", "out_ch": cfg.head_channels, "kernel": 1,
                "name": f"lateral.s{stride}",
            }]
            for i in range(cfg.head_convs):
                for branch in ("cls", "reg"):
                    level_chain.append({
                        "kind": "conv", "out_ch": cfg.head_channels, "kernel": 3,
                        "padding": 1, "name": f"head.{branch}{i}.s{stride}",
                    })
            report.merge(count_flops(level_chain, (lat.in_channels, lh, lw)))
            head_out = [
                {"kind": "conv", "out_ch": cfg.num_classes, "kernel": 3,
                 "padding": 1, "name": f"cls_pred.s{stride}"},
            ]
            report.merge(count_flops(head_out, (cfg.head_channels, lh, lw)))
            report.merge(count_flops(
                [{"kind": "conv", "out_ch": 4 * cfg.num_bins, "kernel": 3,
                  "padding": 1, "name": f"reg_pred.s{stride}"}],
                (cfg.head_channels, lh, lw),
            ))
        if cfg.light_ml:
            report.merge(flop_overhead(cfg.head_channels, cfg.light_ml_k,
                                       image_hw, cfg.strides))
        return report
