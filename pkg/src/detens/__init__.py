"""Single-pass ensemble uncertainty for set-prediction detectors.

Grouped-query decoding, BSAS clustering of the pooled detection sets,
confidence/box/covariance aggregation, and the probabilistic evaluation
stack (mAP, D-ECE, PDQ).
"""

from detens.geometry import Box, BoxFormat, iou, convert, covariance_convert
from detens.clustering import Detection, Cluster, ClusteringParams, bsas_cluster, sort_detections
from detens.aggregation import (
    AggregationStrategy,
    ProbabilisticDetection,
    aggregate_all,
    aggregate_box,
    aggregate_covariance,
    final_confidence,
    softmax_weights,
)

__version__ = "0.1.0"

__all__ = [
    "Box",
    "BoxFormat",
    "iou",
    "convert",
    "covariance_convert",
    "Detection",
    "Cluster",
    "ClusteringParams",
    "bsas_cluster",
    "sort_detections",
    "AggregationStrategy",
    "ProbabilisticDetection",
    "aggregate_all",
    "aggregate_box",
    "aggregate_covariance",
    "final_confidence",
    "softmax_weights",
]
