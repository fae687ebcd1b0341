"""Collapse clusters into probabilistic detections.

Per cluster: a confidence (support-scaled maximum by default), a
softmax(confidence)-weighted mean box and the matching weighted covariance
of the member boxes. Everything is computed in normalized CXCYWH.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np

from detens.clustering import Cluster
from detens.errors import ClusterError, ConfigurationError
from detens.geometry import Box, BoxFormat


class AggregationStrategy(str, enum.Enum):
    MEAN_CONF = "mean_conf"
    MAX_CONF = "max_conf"
    MAX_CONF_SCALED = "max_conf_scaled"

    @classmethod
    def parse(cls, value) -> "AggregationStrategy":
        if isinstance(value, cls):
            return value
        aliases = {"mean": cls.MEAN_CONF, "max": cls.MAX_CONF, "max_scaled": cls.MAX_CONF_SCALED}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            raise ConfigurationError(f"unknown aggregation strategy {value!r}") from None


@dataclass(eq=False)
class ProbabilisticDetection:
    box: Box
    covariance: np.ndarray
    label: int
    confidence: float
    support: int
    image_id: int = 0

    def __repr__(self):
        return (
            f"ProbabilisticDetection(image_id={self.image_id}, label={self.label}, "
            f"confidence={self.confidence:.4f}, support={self.support}, box={self.box.coords})"
        )


def support_scale(size: int, num_groups: int) -> float:
    """``min(|C|, G) / G``."""
    return min(size, num_groups) / num_groups


def final_confidence(cluster: Cluster, num_groups: int, strategy=AggregationStrategy.MAX_CONF_SCALED) -> float:
    if len(cluster.members) == 0:
        raise ClusterError("cannot aggregate an empty cluster")
    if num_groups < 1:
        raise ConfigurationError(f"number of groups must be >= 1, got {num_groups}")
    strategy = AggregationStrategy.parse(strategy)
    confs = [d.confidence for d in cluster.members]
    if strategy is AggregationStrategy.MEAN_CONF:
        return float(np.mean(confs))
    top = max(confs)
    if strategy is AggregationStrategy.MAX_CONF:
        return top
    return support_scale(len(confs), num_groups) * top


def softmax_weights(confidences: Sequence[float]) -> np.ndarray:
    # inputs are confidences in [0, 1], exp cannot overflow
    e = np.exp(np.asarray(confidences, dtype=float))
    return e / e.sum()


def _member_boxes(cluster: Cluster) -> np.ndarray:
    if len(cluster.members) == 0:
        raise ClusterError("cannot aggregate an empty cluster")
    for d in cluster.members:
        if d.box.fmt is not BoxFormat.CXCYWH:
            raise ConfigurationError("cluster members must carry CXCYWH boxes")
    return np.array([d.box.coords for d in cluster.members])


def aggregate_box(cluster: Cluster) -> Box:
    boxes = _member_boxes(cluster)
    w = softmax_weights([d.confidence for d in cluster.members])
    # offsets from the seed keep identical members exactly equal to the mean
    ref = boxes[0]
    return Box.cxcywh(*(ref + w @ (boxes - ref)))


def aggregate_covariance(cluster: Cluster, mean_box: Box) -> np.ndarray:
    boxes = _member_boxes(cluster)
    w = softmax_weights([d.confidence for d in cluster.members])
    dev = boxes - mean_box.as_array()
    cov = (w[:, None] * dev).T @ dev
    return (cov + cov.T) / 2


def aggregate_cluster(cluster: Cluster, num_groups: int, strategy=AggregationStrategy.MAX_CONF_SCALED, image_id: int = 0) -> ProbabilisticDetection:
    box = aggregate_box(cluster)
    cov = aggregate_covariance(cluster, box)
    return ProbabilisticDetection(
        box=box,
        covariance=cov,
        label=cluster.label,
        confidence=final_confidence(cluster, num_groups, strategy),
        support=len(cluster.members),
        image_id=image_id,
    )


def aggregate_all(
    clusters: Iterable[Cluster],
    num_groups: int,
    strategy=AggregationStrategy.MAX_CONF_SCALED,
    conf_threshold: float = 0.0,
    image_id: int = 0,
) -> List[ProbabilisticDetection]:
    """Aggregate every cluster, drop those below ``conf_threshold``, sort by confidence."""
    if num_groups < 1:
        raise ConfigurationError(f"number of groups must be >= 1, got {num_groups}")
    if not 0.0 <= conf_threshold <= 1.0:
        raise ConfigurationError(f"confidence threshold must lie in [0, 1], got {conf_threshold}")
    strategy = AggregationStrategy.parse(strategy)
    out = [aggregate_cluster(c, num_groups, strategy, image_id) for c in clusters]
    out = [d for d in out if d.confidence >= conf_threshold]
    out.sort(key=lambda d: -d.confidence)
    return out
