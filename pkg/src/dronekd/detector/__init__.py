from .assign import AssignmentResult, assign_targets
from .config import ModelConfig
from .decode import Detection, decode_batch, decode_detections, nms
from .losses import detection_loss
from .model import DetectionOutput, GFLDetector, LevelOutput

__all__ = [
    "AssignmentResult", "assign_targets", "ModelConfig",
    "Detection", "decode_batch", "decode_detections", "nms",
    "detection_loss", "DetectionOutput", "GFLDetector", "LevelOutput",
]
