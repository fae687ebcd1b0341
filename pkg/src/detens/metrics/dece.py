"""Detection expected calibration error with reliability-diagram bins."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List

import numpy as np

from detens.aggregation import ProbabilisticDetection
from detens.errors import ConfigurationError
from detens.metrics.common import GroundTruthStore, detections_xyxy, greedy_match, group_by_image, gts_xyxy


@dataclass
class ReliabilityBin:
    lo: float
    hi: float
    mean_conf: float
    precision: float
    count: int


@dataclass
class DeceResult:
    dece: float
    bins: List[ReliabilityBin] = field(default_factory=list)
    num_samples: int = 0

    @property
    def no_samples(self) -> bool:
        return self.num_samples == 0


def reliability_bins(confidences, tp_flags, num_bins: int = 10) -> DeceResult:
    """Equal-width confidence bins over [0, 1]; the top edge belongs to the last bin."""
    if num_bins < 1:
        raise ConfigurationError(f"number of bins must be >= 1, got {num_bins}")
    confidences = np.asarray(confidences, dtype=float)
    tp_flags = np.asarray(tp_flags, dtype=float)
    n = len(confidences)
    idx = np.minimum((confidences * num_bins).astype(int), num_bins - 1)
    bins, err = [], 0.0
    for b in range(num_bins):
        sel = idx == b
        count = int(sel.sum())
        if count:
            mean_conf = float(confidences[sel].mean())
            precision = float(tp_flags[sel].mean())
            err += count / n * abs(precision - mean_conf)
        else:
            mean_conf = precision = float("nan")
        bins.append(ReliabilityBin(b / num_bins, (b + 1) / num_bins, mean_conf, precision, count))
    return DeceResult(dece=float(err), bins=bins, num_samples=n)


def match_detections(detections, store: GroundTruthStore, conf_threshold: float = 0.3, match_iou: float = 0.5):
    """TP flags for all detections at or above ``conf_threshold``."""
    by_image = group_by_image(detections, store)
    confs, flags = [], []
    for image_id in store.image_ids():
        dets = [d for d in by_image[image_id] if d.confidence >= conf_threshold]
        if not dets:
            continue
        gts = store.for_image(image_id)
        tp = greedy_match(
            detections_xyxy(dets, store.images[image_id]),
            [d.label for d in dets],
            [d.confidence for d in dets],
            gts_xyxy(gts),
            [g.label for g in gts],
            match_iou,
        )
        confs.extend(d.confidence for d in dets)
        flags.extend(tp)
    return np.asarray(confs, dtype=float), np.asarray(flags, dtype=bool)


def compute_dece(
    detections: Iterable[ProbabilisticDetection],
    store: GroundTruthStore,
    num_bins: int = 10,
    conf_threshold: float = 0.3,
    match_iou: float = 0.5,
) -> DeceResult:
    confs, flags = match_detections(detections, store, conf_threshold, match_iou)
    return reliability_bins(confs, flags, num_bins)
