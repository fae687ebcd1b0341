"""Evaluation: COCO mAP, D-ECE with reliability bins, and PDQ."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

from detens.aggregation import ProbabilisticDetection
from detens.metrics.coco_map import COCO_IOU_THRESHOLDS, MapResult, compute_map, interpolated_ap
from detens.metrics.common import GroundTruthInstance, GroundTruthStore, ImageInfo, greedy_match
from detens.metrics.dece import DeceResult, ReliabilityBin, compute_dece, reliability_bins
from detens.metrics.hungarian import assignment_cost, hungarian_assign
from detens.metrics.pdq import DEFAULT_EPS, PdqResult, compute_pdq

__all__ = [
    "COCO_IOU_THRESHOLDS",
    "DEFAULT_EPS",
    "DeceResult",
    "EvalReport",
    "GroundTruthInstance",
    "GroundTruthStore",
    "ImageInfo",
    "MapResult",
    "PdqResult",
    "REPORT_SCHEMA",
    "ReliabilityBin",
    "assignment_cost",
    "compute_dece",
    "compute_map",
    "compute_pdq",
    "evaluate",
    "greedy_match",
    "hungarian_assign",
    "interpolated_ap",
    "reliability_bins",
]


def _num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


@dataclass
class EvalReport:
    map: MapResult
    dece: DeceResult
    pdq: PdqResult
    settings: dict

    def to_dict(self) -> dict:
        return {
            "settings": dict(self.settings),
            "map": {
                "map": self.map.map,
                "ap50": _num(self.map.per_threshold.get(0.5)),
                "per_class": {str(k): v for k, v in self.map.per_class.items()},
                "per_threshold": {f"{k:.2f}": v for k, v in self.map.per_threshold.items()},
            },
            "dece": {
                "dece": self.dece.dece,
                "num_samples": self.dece.num_samples,
                "no_samples": self.dece.no_samples,
                "bins": [
                    {
                        "lo": b.lo,
                        "hi": b.hi,
                        "mean_conf": _num(b.mean_conf),
                        "precision": _num(b.precision),
                        "count": b.count,
                    }
                    for b in self.dece.bins
                ],
            },
            "pdq": {
                "pdq": self.pdq.pdq,
                "tp": self.pdq.tp,
                "fp": self.pdq.fp,
                "fn": self.pdq.fn,
                "avg_spatial_quality": self.pdq.avg_spatial_quality,
                "avg_label_quality": self.pdq.avg_label_quality,
                "avg_pairwise_quality": self.pdq.avg_pairwise_quality,
                "avg_fg_quality": self.pdq.avg_fg_quality,
                "avg_bg_quality": self.pdq.avg_bg_quality,
                "per_class": {str(k): dict(v) for k, v in self.pdq.per_class.items()},
            },
        }


def evaluate(
    detections: Iterable[ProbabilisticDetection],
    store: GroundTruthStore,
    conf_threshold: float = 0.3,
    num_bins: int = 10,
    match_iou: float = 0.5,
    eps: float = DEFAULT_EPS,
    threads: int = 1,
) -> EvalReport:
    """mAP over every detection; D-ECE and PDQ over those at or above ``conf_threshold``."""
    detections = list(detections)
    return EvalReport(
        map=compute_map(detections, store),
        dece=compute_dece(detections, store, num_bins, conf_threshold, match_iou),
        pdq=compute_pdq(detections, store, conf_threshold, eps, threads),
        settings={
            "conf_threshold": conf_threshold,
            "num_bins": num_bins,
            "match_iou": match_iou,
            "eps": eps,
            "num_images": len(store.images),
            "num_gt": len(store),
            "num_detections": len(detections),
        },
    )


_unit = {"type": "number", "minimum": 0.0, "maximum": 1.0}
_unit_or_null = {"anyOf": [_unit, {"type": "null"}]}
_count = {"type": "integer", "minimum": 0}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["settings", "map", "dece", "pdq"],
    "properties": {
        "settings": {"type": "object"},
        "map": {
            "type": "object",
            "required": ["map", "per_class", "per_threshold"],
            "properties": {
                "map": _unit,
                "ap50": _unit_or_null,
                "per_class": {"type": "object", "additionalProperties": _unit},
                "per_threshold": {"type": "object", "additionalProperties": _unit},
            },
        },
        "dece": {
            "type": "object",
            "required": ["dece", "num_samples", "no_samples", "bins"],
            "properties": {
                "dece": _unit,
                "num_samples": _count,
                "no_samples": {"type": "boolean"},
                "bins": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["lo", "hi", "mean_conf", "precision", "count"],
                        "properties": {
                            "lo": _unit,
                            "hi": _unit,
                            "mean_conf": _unit_or_null,
                            "precision": _unit_or_null,
                            "count": _count,
                        },
                    },
                },
            },
        },
        "pdq": {
            "type": "object",
            "required": ["pdq", "tp", "fp", "fn", "per_class"],
            "properties": {
                "pdq": _unit,
                "tp": _count,
                "fp": _count,
                "fn": _count,
                "avg_spatial_quality": _unit,
                "avg_label_quality": _unit,
                "avg_pairwise_quality": _unit,
                "avg_fg_quality": _unit,
                "avg_bg_quality": _unit,
                "per_class": {
                    "type": "object",
                    "additionalProperties": {
                        "type": "object",
                        "required": ["tp", "fp", "fn"],
                        "properties": {"tp": _count, "fp": _count, "fn": _count},
                    },
                },
            },
        },
    },
}
