"""Weakly supervised point cloud segmentation with a small numpy encoder."""
from .core import LabelMask, PointCloud, TrainConfig, ValidationError

__version__ = "0.1.0"
__all__ = ["LabelMask", "PointCloud", "TrainConfig", "ValidationError", "__version__"]
