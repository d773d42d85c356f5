"""Streaming changepoint detection, batch domain adaptation, and Shapley
explanation tracking for multivariate industrial sensor streams."""

__version__ = "0.1.0"

from .core import FeatureSchema, LabeledSample, Sample, SegmentDescriptor, SegmentKind
from .divergence import KlEstimatorConfig, KlForm, estimate_kl, knn_distance
from .changepoint import (
    ChangepointMonitor,
    MonitorConfig,
    PageHinkley,
    PageHinkleyConfig,
    calibrate_page_hinkley,
)

__all__ = [
    "__version__",
    "FeatureSchema",
    "Sample",
    "LabeledSample",
    "SegmentDescriptor",
    "SegmentKind",
    "KlEstimatorConfig",
    "KlForm",
    "estimate_kl",
    "knn_distance",
    "PageHinkley",
    "PageHinkleyConfig",
    "ChangepointMonitor",
    "MonitorConfig",
    "calibrate_page_hinkley",
]
