"""Multi-view reliable pseudo-labels for semi-supervised sonar object detection."""

from .geometry import BBox, clip_to_image, corners, enclosing_rect, iou
from .reliability import (DetectionSet, ReliabilityConfig, ScoredPseudoLabel, assess,
                          filter_reliable, reliability_score)

__version__ = "0.1.0"

__all__ = [
    "BBox", "DetectionSet", "ReliabilityConfig", "ScoredPseudoLabel", "assess",
    "clip_to_image", "corners", "enclosing_rect", "filter_reliable", "iou",
    "reliability_score",
]
