"""COCO-style mean average precision over IoU 0.50:0.95."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence

import numpy as np

from detens.aggregation import ProbabilisticDetection
from detens.geometry import iou_matrix
from detens.metrics.common import GroundTruthStore, detections_xyxy, greedy_match, group_by_image, gts_xyxy

COCO_IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class MapResult:
    map: float
    per_class: Dict[int, float] = field(default_factory=dict)
    per_threshold: Dict[float, float] = field(default_factory=dict)

    @property
    def ap50(self) -> float:
        return self.per_threshold.get(0.5, float("nan"))


def interpolated_ap(tp_flags: Sequence[bool], num_gt: int, recall_points=RECALL_POINTS) -> float:
    """101-point interpolated AP from TP flags already sorted by confidence."""
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if num_gt == 0:
        return float("nan")
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, recall_points, side="left")
    q = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(q.mean())


def compute_map(detections: Iterable[ProbabilisticDetection], store: GroundTruthStore, iou_thresholds=COCO_IOU_THRESHOLDS) -> MapResult:
    """Mean AP over classes with at least one ground truth, then over thresholds."""
    by_image = group_by_image(detections, store)
    gt_counts = store.gt_counts()
    classes = sorted(gt_counts)
    if not classes:
        return MapResult(map=0.0)

    # per image: confidences, labels, ious, gt labels
    prepared = []
    for image_id in store.image_ids():
        dets = by_image[image_id]
        gts = store.for_image(image_id)
        det_boxes = detections_xyxy(dets, store.images[image_id])
        ious = iou_matrix(det_boxes, gts_xyxy(gts))
        prepared.append(
            (
                np.array([d.confidence for d in dets], dtype=float),
                np.array([d.label for d in dets], dtype=int),
                ious,
                np.array([g.label for g in gts], dtype=int),
            )
        )

    ap = np.zeros((len(iou_thresholds), len(classes)))
    for t, thr in enumerate(iou_thresholds):
        flags: Dict[int, List] = {k: [] for k in classes}
        for confs, labels, ious, gt_labels in prepared:
            tp = greedy_match(None, labels, confs, None, gt_labels, thr, ious=ious)
            for i, k in enumerate(labels):
                if k in flags:
                    flags[k].append((confs[i], tp[i]))
        for c, k in enumerate(classes):
            entries = flags[k]
            confs = np.array([e[0] for e in entries], dtype=float)
            order = np.argsort(-confs, kind="mergesort")
            ap[t, c] = interpolated_ap([entries[i][1] for i in order], gt_counts[k])
    return MapResult(
        map=float(ap.mean()),
        per_class={k: float(ap[:, c].mean()) for c, k in enumerate(classes)},
        per_threshold={float(thr): float(ap[t].mean()) for t, thr in enumerate(iou_thresholds)},
    )
