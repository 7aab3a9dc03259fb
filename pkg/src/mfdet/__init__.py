"""Multi-frame LiDAR 3D object detection on a synthetic scene simulator."""

from .geometry import Box7, Pose, ResidualVec, wrap_angle

__version__ = "0.1.0"

__all__ = [
    "Box7",
    "Pose",
    "ResidualVec",
    "wrap_angle",
    "SequenceDetector",
    "__version__",
]


def __getattr__(name):
    # SequenceDetector pulls in torch; import lazily so geometry-only use stays light.
    if name == "SequenceDetector":
        from .estimator import SequenceDetector

        return SequenceDetector
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
