"""Experiment configuration: defaults, flat key=value files, CLI overrides.

Config files are plain text, one ``section.field = value`` per line, ``#``
comments allowed. Every key has a default; ``default_config_text()`` emits
the full documented set, and a run directory always receives the resolved
snapshot in the same format, so configs diff cleanly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .detector.config import ModelConfig
from .distill import DistillConfig
from .synth import SceneSpec


class ConfigError(ValueError):
    """Bad config file, key, or value; maps to CLI exit code 1."""


@dataclass
class DataConfig:
    kind: str = "synthetic"          # synthetic | coco
    coco_annotations: str = ""       # annotation JSON path when kind=coco
    train_images: int = 500
    test_images: int = 100
    image_size: int = 96
    num_objects: tuple[int, int] = (3, 6)
    size_range: tuple[int, int] = (4, 12)
    max_foreground_frac: float = 0.05
    clutter: float = 0.6
    num_classes: int = 3
    seed: int = 77                   # dataset seed, independent of run seed

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            image_size=self.image_size,
            num_objects=self.num_objects,
            size_range=self.size_range,
            max_foreground_frac=self.max_foreground_frac,
            clutter=self.clutter,
            num_classes=self.num_classes,
            seed=self.seed,
        )


@dataclass
class OptimConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 12
    batch_size: int = 8
    warmup_steps: int = 30
    hflip: bool = True  # random horizontal flip during training
    # Step decay (x0.1) at these fractions of total training, the usual
    # 8-and-11-of-12 schedule shape.
    decay_at: tuple[float, float] = (2.0 / 3.0, 11.0 / 12.0)
    decay_factor: float = 0.1


@dataclass
class KDConfig:
    detection: bool = True       # ground-truth detection loss (off = KD only)
    cls_kd: bool = True          # classification logit distillation
    cid: bool = True             # region-weighted regression distillation
    global_distill: bool = True  # masked-reconstruction distillation
    cls_weight: float = 0.25     # weight of the classification KD term


@dataclass
class EvalConfig:
    score_thresh: float = 0.05
    nms_iou: float = 0.6
    max_dets: int = 100


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    student: ModelConfig = field(default_factory=lambda: ModelConfig(role="student"))
    teacher: ModelConfig = field(default_factory=lambda: ModelConfig(role="student").widened())
    optim: OptimConfig = field(default_factory=OptimConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = ("data", "student", "teacher", "optim", "distill", "kd", "eval")


def _sections(cfg: ExperimentConfig) -> dict[str, object]:
    return {name: getattr(cfg, name) for name in _SECTIONS}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], (list, tuple)):
            return ",".join(":".join(_format_value(x) for x in pair) for pair in value)
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, template):
    text = text.strip()
    if isinstance(template, bool):
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {text!r}")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    return text


def _parse_value(text: str, template):
    if isinstance(template, (list, tuple)):
        if template and isinstance(template[0], (list, tuple)):
            pairs = []
            for part in text.split(","):
                vals = part.split(":")
                if len(vals) != len(template[0]):
                    raise ConfigError(f"expected lo:hi pairs, got {part!r}")
                pairs.append(tuple(_parse_scalar(v, template[0][0]) for v in vals))
            return tuple(pairs)
        elem = template[0] if template else 0
        return tuple(_parse_scalar(v, elem) for v in text.split(","))
    return _parse_scalar(text, template)


def flatten(cfg: ExperimentConfig) -> dict[str, str]:
    out = {"seed": _format_value(cfg.seed), "out_dir": cfg.out_dir}
    for section, obj in _sections(cfg).items():
        for f in dataclasses.fields(obj):
            out[f"{section}.{f.name}"] = _format_value(getattr(obj, f.name))
    return out


def to_text(cfg: ExperimentConfig) -> str:
    flat = flatten(cfg)
    return "\n".join(f"{k} = {flat[k]}" for k in sorted(flat)) + "\n"


def default_config_text() -> str:
    return to_text(ExperimentConfig())


def set_key(cfg: ExperimentConfig, key: str, raw_value: str) -> None:
    key = key.strip()
    if key == "seed":
        cfg.seed = int(raw_value)
        return
    if key == "out_dir":
        cfg.out_dir = raw_value.strip()
        return
    if "." not in key:
        raise ConfigError(f"unknown config key {key!r}")
    section, name = key.split(".", 1)
    objs = _sections(cfg)
    if section not in objs:
        raise ConfigError(f"unknown config section {section!r} in key {key!r}")
    obj = objs[section]
    if not any(f.name == name for f in dataclasses.fields(obj)):
        raise ConfigError(f"unknown config key {key!r}")
    template = getattr(obj, name)
    try:
        setattr(obj, name, _parse_value(raw_value, template))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw_value!r} ({exc})") from None


def parse_config(text: str, overrides: list[str] | None = None) -> ExperimentConfig:
    """Build a config from key=value text plus ``key=value`` override strings."""
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = stripped.split("=", 1)
        set_key(cfg, key, value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_key(cfg, key, value)
    _validate(cfg)
    return cfg


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), overrides)


def _validate(cfg: ExperimentConfig) -> None:
    try:
        cfg.student.validate()
        cfg.teacher.validate()
        cfg.distill.validate()
        cfg.data.scene_spec()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.student.num_classes != cfg.teacher.num_classes:
        raise ConfigError("teacher and student must agree on num_classes")
    if cfg.student.num_bins != cfg.teacher.num_bins:
        raise ConfigError("teacher and student must agree on num_bins")
    if cfg.optim.epochs < 0:
        raise ConfigError("optim.epochs must be nonnegative")
