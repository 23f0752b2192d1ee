"""Egocentric hand-object segmentation toolkit.

Contact-boundary labels, a sequential hand -> boundary -> object pipeline,
context-aware copy-paste augmentation, benchmark metrics and hand-state
classification.
"""

from .maskcore import (BACKGROUND, LEFT_HAND, LEFT_OBJECT, RIGHT_HAND, RIGHT_OBJECT, TWO_HAND_OBJECT,
                       LabelMap, MetricsReport, aggregate_metrics, class_metrics, generate_contact_boundary)

__version__ = "0.1.0"

__all__ = [
    "BACKGROUND", "LEFT_HAND", "RIGHT_HAND", "LEFT_OBJECT", "RIGHT_OBJECT", "TWO_HAND_OBJECT",
    "LabelMap", "MetricsReport", "aggregate_metrics", "class_metrics", "generate_contact_boundary",
]
