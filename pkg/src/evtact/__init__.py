"""Event-camera roller tactile sensing toolkit."""

__version__ = "0.1.0"

from .errors import AlignmentError, ConfigError, DataError, MetricError
from .geometry import CameraIntrinsics, PoseSE3

__all__ = [
    "AlignmentError",
    "CameraIntrinsics",
    "ConfigError",
    "DataError",
    "MetricError",
    "PoseSE3",
    "__version__",
]
