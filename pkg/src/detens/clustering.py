"""Sequential IoU clustering (BSAS) of pooled ensemble detections."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Sequence

from detens.errors import ConfigurationError
from detens.geometry import Box, iou

DEFAULT_THETA = 0.7


@dataclass(frozen=True)
class Detection:
    """One raw prediction from a single query of a single group.

    ``group`` is 1-based (``1..G``), ``query`` is the 0-based row inside the
    group, ``label`` is the 1-based class index.
    """

    box: Box
    label: int
    confidence: float
    group: int = 1
    query: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class Cluster:
    label: int
    members: List[Detection] = field(default_factory=list)

    @property
    def seed(self) -> Detection:
        return self.members[0]

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class ClusteringParams:
    theta: float = DEFAULT_THETA
    multi_cluster_assignment: str = "best_iou"

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ConfigurationError(f"theta must lie in (0, 1], got {self.theta}")
        if self.multi_cluster_assignment != "best_iou":
            raise ConfigurationError(
                f"unsupported multi-cluster assignment {self.multi_cluster_assignment!r}"
            )


def _sort_key(det: Detection):
    return (-det.confidence, det.group, det.query)


def sort_detections(pool: Iterable[Detection]) -> List[Detection]:
    """Descending confidence, ties broken by (group, query) ascending."""
    return sorted(pool, key=_sort_key)


def bsas_cluster(pool: Sequence[Detection], params: ClusteringParams = ClusteringParams()) -> List[Cluster]:
    """Greedy sequential clustering over the confidence-sorted pool.

    Each detection is compared against the seed box of every existing
    cluster with the same label. It joins the cluster with the highest IoU
    if that IoU reaches ``params.theta`` (earliest cluster wins ties);
    otherwise it seeds a new cluster. Cluster size is not capped, and one
    cluster may hold several detections from the same group.
    """
    clusters: List[Cluster] = []
    for det in sort_detections(pool):
        best, best_iou = None, -1.0
        for cluster in clusters:
            if cluster.label != det.label:
                continue
            overlap = iou(det.box, cluster.seed.box)
            if overlap >= params.theta and overlap > best_iou:
                best, best_iou = cluster, overlap
        if best is None:
            clusters.append(Cluster(label=det.label, members=[det]))
        else:
            best.members.append(det)
    return clusters
