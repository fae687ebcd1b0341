"""End-to-end glue: detection sets -> clusters -> probabilistic detections,
plus the seeded synthetic benchmark behind the ablation studies."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Sequence

import numpy as np

from detens.aggregation import AggregationStrategy, ProbabilisticDetection, aggregate_all
from detens.clustering import ClusteringParams, Detection, bsas_cluster
from detens.metrics import evaluate
from detens.metrics.common import GroundTruthStore
from detens.synth import EnsembleNoise, SceneParams, simulate_ensemble, synthetic_dataset

GROUP_COUNTS = (1, 3, 5, 7, 9)
STRATEGIES = (AggregationStrategy.MEAN_CONF, AggregationStrategy.MAX_CONF, AggregationStrategy.MAX_CONF_SCALED)


def cluster_and_aggregate(
    detection_sets: Sequence[Sequence[Detection]],
    num_groups: int,
    theta: float = 0.7,
    strategy=AggregationStrategy.MAX_CONF_SCALED,
    conf_threshold: float = 0.0,
    image_id: int = 0,
) -> List[ProbabilisticDetection]:
    pool = [d for dets in detection_sets for d in dets]
    clusters = bsas_cluster(pool, ClusteringParams(theta))
    return aggregate_all(clusters, num_groups, strategy, conf_threshold, image_id)


@dataclass(frozen=True)
class BenchmarkSettings:
    """One cell of an ablation: the synthetic setup plus pipeline knobs."""

    scene: SceneParams = SceneParams()
    noise: EnsembleNoise = EnsembleNoise()
    num_groups: int = 5
    theta: float = 0.7
    strategy: AggregationStrategy = AggregationStrategy.MAX_CONF_SCALED
    conf_threshold: float = 0.3
    num_bins: int = 10
    match_iou: float = 0.5
    eps: float = 1.0


def run_trial(settings: BenchmarkSettings, seed: int) -> Dict[str, float]:
    """Score one synthetic image (scene and noise both keyed by ``seed``)."""
    store = synthetic_dataset(replace(settings.scene, seed=seed), num_images=1)
    image = store.images[seed]
    sets = simulate_ensemble(
        store.for_image(seed),
        settings.num_groups,
        replace(settings.noise, seed=seed),
        image,
        settings.scene.num_classes,
    )
    dets = cluster_and_aggregate(sets, settings.num_groups, settings.theta, settings.strategy, 0.0, seed)
    report = evaluate(dets, store, settings.conf_threshold, settings.num_bins, settings.match_iou, settings.eps)
    return {"pdq": report.pdq.pdq, "dece": report.dece.dece, "map": report.map.map}


@dataclass
class SettingSummary:
    label: str
    values: Dict[str, np.ndarray]

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values[metric]))

    def se(self, metric: str) -> float:
        v = self.values[metric]
        return float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0


def run_setting(settings: BenchmarkSettings, seeds: Sequence[int], label: str = "", threads: int = 1) -> SettingSummary:
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda s: run_trial(settings, s), seeds))
    else:
        rows = [run_trial(settings, s) for s in seeds]
    values = {k: np.array([r[k] for r in rows]) for k in ("pdq", "dece", "map")}
    return SettingSummary(label, values)


def ablate_groups(base: BenchmarkSettings, seeds: Sequence[int], group_counts=GROUP_COUNTS, threads: int = 1) -> List[SettingSummary]:
    return [run_setting(replace(base, num_groups=g), seeds, str(g), threads) for g in group_counts]


def ablate_strategy(base: BenchmarkSettings, seeds: Sequence[int], strategies=STRATEGIES, threads: int = 1) -> List[SettingSummary]:
    return [run_setting(replace(base, strategy=s), seeds, s.value, threads) for s in strategies]
