"""Analytic FLOP accounting for layer chains.

Convention: one multiply-accumulate = one FLOP, so a convolution costs
Cout * Cin * Kh * Kw * Hout * Wout. Parameter-free layers (activations,
pooling, shuffling, upsampling) are counted as zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass
class FlopReport:
    entries: list[tuple[str, int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(f for _, f in self.entries)

    def add(self, name: str, flops: int) -> None:
        self.entries.append((name, int(flops)))

    def merge(self, other: "FlopReport") -> None:
        self.entries.extend(other.entries)

    def __str__(self) -> str:
        lines = [f"  {name:32s} {flops:>14,d}" for name, flops in self.entries]
        lines.append(f"  {'TOTAL':32s} {self.total:>14,d}")
        return "\n".join(lines)


def conv_out_hw(h: int, w: int, kernel: int, stride: int, padding: int) -> tuple[int, int]:
    return (h + 2 * padding - kernel) // stride + 1, (w + 2 * padding - kernel) // stride + 1


def fpn_level_shapes(image_hw: tuple[int, int], strides) -> list[tuple[int, int]]:
    """Feature-map sizes per pyramid level: ceil(H/s) x ceil(W/s)."""
    h, w = image_hw
    return [(math.ceil(h / s), math.ceil(w / s)) for s in strides]


_ZERO_COST = {"relu", "sigmoid", "maxpool", "avgpool", "upsample2x", "channel_shuffle"}


def count_flops(network_spec: list[dict], input_shape: tuple[int, int, int]) -> FlopReport:
    """Count MACs for a sequential layer chain.

    ``network_spec`` is a list of layer dicts with a ``kind`` key:
      - conv: out_ch, kernel, stride (default 1), padding (default 0)
      - linear: out_features (input is flattened)
      - relu / sigmoid / channel_shuffle / upsample2x: free
      - maxpool / avgpool: kernel (free, but changes spatial dims)
    ``input_shape`` is (channels, H, W). Unknown kinds are rejected.
    """
    report = FlopReport()
    c, h, w = input_shape
    for i, layer in enumerate(network_spec):
        kind = layer.get("kind")
        name = layer.get("name", f"{i}:{kind}")
        if kind == "conv":
            k = layer["kernel"]
            stride = layer.get("stride", 1)
            padding = layer.get("padding", 0)
            out_ch = layer["out_ch"]
            ho, wo = conv_out_hw(h, w, k, stride, padding)
            report.add(name, out_ch * c * k * k * ho * wo)
            c, h, w = out_ch, ho, wo
        elif kind == "linear":
            out_f = layer["out_features"]
            report.add(name, out_f * c * h * w)
            c, h, w = out_f, 1, 1
        elif kind in ("maxpool", "avgpool"):
            k = layer["kernel"]
            report.add(name, 0)
            h, w = h // k, w // k
        elif kind == "upsample2x":
            report.add(name, 0)
            h, w = h * 2, w * 2
        elif kind in _ZERO_COST:
            report.add(name, 0)
        else:
            raise ValueError(f"unknown layer kind {kind!r} at position {i}")
    return report
