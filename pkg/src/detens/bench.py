"""Wall-clock comparison of single-pass grouped decoding against sequential passes."""

from __future__ import annotations

import gc
import time
from dataclasses import replace
from typing import Callable, Dict, List, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from detens.decoder import (
    DecoderConfig,
    GroupDecoder,
    build_group_mask,
    ensemble_members,
    make_features,
    make_query_groups,
)

BENCH_LAYOUTS = ("masked_joint", "batched_groups", "sequential_groups", "sequential_ensemble")
BENCH_FIELDS = ("layout", "groups", "mean_ms", "std_ms", "repetitions", "threads")


def time_calls(fns: Sequence[Callable[[], object]], repetitions: int = 20, warmup: int = 3) -> np.ndarray:
    """Seconds per call, shape ``(len(fns), repetitions)``.

    Repetitions are interleaved round-robin over ``fns`` so slow drift in
    machine speed hits every workload alike. The garbage collector is paused
    while timing, as ``timeit`` does.
    """
    for fn in fns:
        for _ in range(warmup):
            fn()
    out = np.empty((len(fns), repetitions))
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for r in range(repetitions):
            for i, fn in enumerate(fns):
                t0 = time.perf_counter()
                fn()
                out[i, r] = time.perf_counter() - t0
    finally:
        if was_enabled:
            gc.enable()
    return out


def _workload(cfg: DecoderConfig, layout: str, num_groups: int, feature_seed: int = 0) -> Callable[[], object]:
    cfg = replace(cfg, num_groups=num_groups)
    features = make_features(cfg, feature_seed)
    if layout == "sequential_ensemble":
        members = ensemble_members(cfg, num_groups)
        queries = make_query_groups(cfg, 1)

        def run():
            return [m.forward(features, queries, layout="sequential_groups") for m in members]

        return run
    model = GroupDecoder(cfg)
    queries = make_query_groups(cfg)
    mask = build_group_mask(num_groups, cfg.queries_per_group) if layout == "masked_joint" else None
    return lambda: model.forward(features, queries, mask=mask, layout=layout)


def run_benchmark(
    cfg: DecoderConfig,
    group_counts: Sequence[int] = (1, 3, 5, 7, 9),
    layouts: Sequence[str] = BENCH_LAYOUTS,
    repetitions: int = 20,
    warmup: int = 3,
    threads: int = 1,
) -> List[Dict]:
    """One row per (layout, G): mean and std wall time of a decoder pass in ms."""
    cells = [(layout, g) for g in group_counts for layout in layouts]
    with threadpool_limits(limits=threads):
        fns = [_workload(cfg, layout, g) for layout, g in cells]
        times = time_calls(fns, repetitions, warmup) * 1e3
    return [
        {
            "layout": layout,
            "groups": g,
            "mean_ms": float(t.mean()),
            "std_ms": float(t.std(ddof=1)) if repetitions > 1 else 0.0,
            "repetitions": repetitions,
            "threads": threads,
        }
        for (layout, g), t in zip(cells, times)
    ]
