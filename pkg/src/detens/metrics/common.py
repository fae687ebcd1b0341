"""Ground-truth containers and helpers shared by the metrics."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Tuple

import numpy as np

from detens.aggregation import ProbabilisticDetection
from detens.errors import DanglingReferenceError
from detens.geometry import Box, BoxFormat, convert


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: float
    height: float
    file_name: str = ""

    @property
    def size(self) -> Tuple[float, float]:
        return (self.width, self.height)


@dataclass(frozen=True)
class GroundTruthInstance:
    image_id: int
    label: int
    box: Box  # XYXY, absolute pixels
    instance_id: int = 0


@dataclass
class GroundTruthStore:
    images: Dict[int, ImageInfo] = field(default_factory=dict)
    instances: Dict[int, List[GroundTruthInstance]] = field(default_factory=dict)
    categories: Dict[int, str] = field(default_factory=dict)

    def for_image(self, image_id: int) -> List[GroundTruthInstance]:
        return self.instances.get(image_id, [])

    def __len__(self) -> int:
        return sum(len(v) for v in self.instances.values())

    def image_ids(self) -> List[int]:
        return sorted(self.images)

    def gt_counts(self) -> Dict[int, int]:
        counts: Dict[int, int] = defaultdict(int)
        for gts in self.instances.values():
            for gt in gts:
                counts[gt.label] += 1
        return dict(counts)


def group_by_image(detections: Iterable[ProbabilisticDetection], store: GroundTruthStore) -> Dict[int, List[ProbabilisticDetection]]:
    """Bucket detections per image; raise on image ids the store does not know."""
    if isinstance(detections, Mapping):
        detections = [d for dets in detections.values() for d in dets]
    out: Dict[int, List[ProbabilisticDetection]] = {i: [] for i in store.images}
    for det in detections:
        if det.image_id not in store.images:
            raise DanglingReferenceError("image", det.image_id)
        out[det.image_id].append(det)
    return out


def detections_xyxy(dets: List[ProbabilisticDetection], image: ImageInfo) -> np.ndarray:
    if not dets:
        return np.zeros((0, 4))
    return np.array([convert(d.box, BoxFormat.XYXY, image.size).coords for d in dets])


def gts_xyxy(gts: List[GroundTruthInstance]) -> np.ndarray:
    if not gts:
        return np.zeros((0, 4))
    return np.array([g.box.coords for g in gts])


def greedy_match(det_boxes, det_labels, det_confs, gt_boxes, gt_labels, iou_threshold, ious=None) -> np.ndarray:
    """Confidence-ordered, class-aware matching within one image.

    Each detection, from most to least confident, takes the still-unmatched
    ground truth of its class with the highest IoU, provided the IoU reaches
    ``iou_threshold``. Returns a boolean TP flag per detection in input order.
    """
    from detens.geometry import iou_matrix

    det_labels = np.asarray(det_labels)
    gt_labels = np.asarray(gt_labels)
    n = len(det_labels)
    tp = np.zeros(n, dtype=bool)
    if n == 0 or len(gt_labels) == 0:
        return tp
    if ious is None:
        ious = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_labels), dtype=bool)
    order = np.argsort(-np.asarray(det_confs, dtype=float), kind="mergesort")
    for i in order:
        cand = np.where((gt_labels == det_labels[i]) & ~taken, ious[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold and cand[j] > 0:
            taken[j] = True
            tp[i] = True
    return tp
