"""Video segmentation with tri-directional selective state space scans, a
boundary-aware affine constraint, and a small numpy autodiff engine."""

from .boundary import AffineEstimator, LossWeights, affine_constraint_loss, total_loss
from .config import TrainConfig
from .data import VideoClip, generate_clip
from .metrics import MetricReport, metric_report
from .model import VivimConfig, VivimNet
from .tensor import MemoryExhausted, NonFiniteError, ShapeError, Tensor

__all__ = [
    "AffineEstimator", "LossWeights", "affine_constraint_loss", "total_loss", "TrainConfig",
    "VideoClip", "generate_clip", "MetricReport", "metric_report", "VivimConfig", "VivimNet",
    "MemoryExhausted", "NonFiniteError", "ShapeError", "Tensor",
]
