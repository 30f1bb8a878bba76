"""Detector architecture configuration shared by teacher and student."""

from __future__ import annotations

from dataclasses import dataclass, field, replace


@dataclass
class ModelConfig:
    num_classes: int = 3
    num_bins: int = 8  # D: bins per box side in the regression distribution
    strides: tuple[int, ...] = (8, 16)
    # One width per 2x downsample from the image (len == log2(max stride)).
    backbone_widths: tuple[int, ...] = (8, 16, 24, 32)
    backbone_depth: int = 1  # convs per stage after the downsampling conv
    head_channels: int = 32
    head_convs: int = 2
    light_ml: bool = False
    light_ml_k: float = 0.25
    # Label assignment: positive iff within center_radius * stride of a GT
    # center whose max side falls inside the level's scale range.
    center_radius: float = 1.5
    scale_ranges: tuple[tuple[float, float], ...] = ((0.0, 8.0), (8.0, 1e9))
    # i_main weights are binary by default; the quality variant scores
    # positives by a Gaussian of normalized center distance.
    quality_i_main: bool = False
    prior_prob: float = 0.01  # classification bias init target probability
    role: str = "student"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_bins < 2:
            raise ValueError(f"num_bins must be >= 2, got {self.num_bins}")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must be strictly increasing: {self.strides}")
        if not 0.0 <= self.light_ml_k <= 1.0:
            raise ValueError(f"light_ml_k must be in [0, 1], got {self.light_ml_k}")
        if len(self.scale_ranges) != len(self.strides):
            raise ValueError("need one scale range per stride")
        n_down = max(self.strides).bit_length() - 1
        if 2 ** n_down != max(self.strides):
            raise ValueError(f"strides must be powers of two: {self.strides}")
        if len(self.backbone_widths) != n_down:
            raise ValueError(
                f"backbone_widths needs {n_down} entries for max stride "
                f"{max(self.strides)}, got {len(self.backbone_widths)}"
            )

    def widened(self, factor: int = 2, role: str = "teacher") -> "ModelConfig":
        """Same architecture scaled up, the usual teacher configuration."""
        return replace(
            self,
            backbone_widths=tuple(w * factor for w in self.backbone_widths),
            head_channels=self.head_channels * factor,
            light_ml=False,
            role=role,
        )
