"""NDT occupancy mapping and Monte Carlo localization that selects measurements by dynamic class."""

from .core import (
    DynamicClass,
    LabeledPoint,
    LabeledScan,
    LabelPartition,
    Pose2,
    SessionLog,
    Trajectory,
    compose,
    inverse,
    normalize_session,
)

__version__ = "0.1.0"
