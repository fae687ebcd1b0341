"""Command-line entry point: ``detens {synth,pipeline,evaluate,bench,ablate}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
Every output file is written atomically after all results are computed.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List

from detens import io
from detens.aggregation import AggregationStrategy
from detens.errors import CapacityError, ConfigurationError, CovarianceError, DataError, DetensError
from detens.metrics.common import ImageInfo

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

STRATEGY_CHOICES = [s.value for s in AggregationStrategy] + ["mean", "max", "max_scaled"]
MODE_CHOICES = ("deterministic", "group_ensemble", "mc_dropout", "mc_group_ensemble")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def _unit(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} is outside [0, 1]")
    return v


def _add_scene_flags(p):
    from detens.synth import SceneParams

    p.add_argument("--objects", type=int, help="fixed object count per image")
    p.add_argument("--min-objects", type=int, default=SceneParams.min_objects)
    p.add_argument("--max-objects", type=int, default=SceneParams.max_objects)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=192)
    p.add_argument("--overlap", type=float, default=0.3, help="max pairwise GT IoU")


def _add_noise_flags(p):
    from detens.synth import EnsembleNoise

    d = EnsembleNoise()
    p.add_argument("--sigma", type=float, default=d.box_sigma, help="box jitter, fraction of box size")
    p.add_argument("--box-correlation", type=_unit, default=d.box_correlation)
    p.add_argument("--conf-base", type=_unit, default=d.conf_base)
    p.add_argument("--conf-jitter", type=float, default=d.conf_jitter)
    p.add_argument("--miss", type=_unit, default=d.miss_prob)
    p.add_argument("--fp-rate", type=float, default=d.fp_rate)


def _add_aggregation_flags(p, conf_threshold: float = 0.3):
    p.add_argument("--theta", type=float, default=0.7)
    p.add_argument("--strategy", choices=STRATEGY_CHOICES, default="max_conf_scaled")
    p.add_argument("--conf-threshold", type=_unit, default=conf_threshold)


def _add_decoder_flags(p, default_none: bool = False):
    def dflt(v):
        return None if default_none else v

    p.add_argument("--queries", type=int, default=dflt(100), help="queries per group")
    p.add_argument("--dropout", type=float, default=dflt(0.1))
    p.add_argument("--embed-dim", type=int, default=dflt(64))
    p.add_argument("--heads", type=int, default=dflt(4))
    p.add_argument("--layers", type=int, default=dflt(3))
    p.add_argument("--num-classes", type=int, default=dflt(8), help="decoder class count")
    p.add_argument("--feature-tokens", type=int, default=dflt(100))


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # accepted before or after the subcommand; the subcommand copy must not
    # overwrite a value given up front, hence SUPPRESS there
    p = _Parser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0)
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1)
    p.add_argument("--output", type=Path, default=argparse.SUPPRESS if suppress else Path("."), help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="detens",
        description="Grouped-query ensembles with uncertainty-aware evaluation.",
        parents=[_global_flags(False)],
    )
    common = _global_flags(True)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="synthetic ground truth and raw ensemble detections")
    _add_scene_flags(p)
    _add_noise_flags(p)
    p.add_argument("--images", type=int, default=1)
    p.add_argument("--groups", type=int, default=5)

    p = sub.add_parser("pipeline", parents=[common], help="cluster and aggregate ensemble detections")
    p.add_argument("--input", type=Path, help="raw detections file from `synth`")
    p.add_argument("--mode", choices=MODE_CHOICES, default=None)
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--layout", choices=("masked_joint", "batched_groups", "sequential_groups"), default=None)
    p.add_argument("--width", type=int, default=None, help="image width for decoder output")
    p.add_argument("--height", type=int, default=None)
    _add_decoder_flags(p, default_none=True)
    # keep everything by default: mAP sweeps all confidences, evaluate applies 0.3 itself
    _add_aggregation_flags(p, conf_threshold=0.0)

    p = sub.add_parser("evaluate", parents=[common], help="mAP, D-ECE and PDQ of a detections file")
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--conf-threshold", type=_unit, default=0.3)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--match-iou", type=_unit, default=0.5)
    p.add_argument("--eps", type=float, default=1.0, help="corner std floor in pixels")

    p = sub.add_parser("bench", parents=[common], help="decoder latency by layout and group count")
    _add_decoder_flags(p)
    p.add_argument("--group-counts", type=_int_list, default=[1, 3, 5, 7, 9])
    p.add_argument("--layouts", default="masked_joint,batched_groups,sequential_groups,sequential_ensemble")
    p.add_argument("--repetitions", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)

    p = sub.add_parser("ablate", parents=[common], help="metrics versus group count or aggregation strategy")
    p.add_argument("study", choices=("groups", "strategy"))
    p.add_argument("--seeds", type=int, default=100, help="number of seeds, starting at --seed")
    p.add_argument("--groups", type=int, default=5, help="G for the strategy study")
    p.add_argument("--group-counts", type=_int_list, default=[1, 3, 5, 7, 9])
    _add_scene_flags(p)
    _add_noise_flags(p)
    _add_aggregation_flags(p)
    return parser


# -- helpers --------------------------------------------------------------


def _scene_params(args):
    from detens.synth import SceneParams

    lo, hi = (args.objects, args.objects) if args.objects is not None else (args.min_objects, args.max_objects)
    return SceneParams(
        image_size=(args.width, args.height),
        min_objects=lo,
        max_objects=hi,
        num_classes=args.classes,
        overlap_limit=args.overlap,
        seed=args.seed,
    )


def _noise(args):
    from detens.synth import EnsembleNoise

    return EnsembleNoise(
        box_sigma=args.sigma,
        conf_base=args.conf_base,
        conf_jitter=args.conf_jitter,
        miss_prob=args.miss,
        fp_rate=args.fp_rate,
        box_correlation=args.box_correlation,
        seed=args.seed,
    )


def _check_common(args):
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if args.seed < 0:
        raise UsageError("--seed must be non-negative")


def _map_images(fn, ids, threads):
    # results come back in ``ids`` order whatever the thread count
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, ids))
    return [fn(i) for i in ids]


# -- commands -------------------------------------------------------------


def cmd_synth(args) -> int:
    from detens.synth import simulate_ensemble, synthetic_dataset

    if args.images < 1 or args.groups < 1:
        raise UsageError("--images and --groups must be >= 1")
    scene = _scene_params(args)
    noise = _noise(args)
    store = synthetic_dataset(scene, args.images)
    ids = store.image_ids()
    sets = _map_images(
        lambda i: simulate_ensemble(store.for_image(i), args.groups, noise, store.images[i], scene.num_classes),
        ids,
        args.threads,
    )
    sets_by_image = dict(zip(ids, sets))
    io.save_coco_gt(store, args.output / "gt.json")
    io.save_raw_detections(sets_by_image, store.images, args.groups, args.output / "raw_detections.json")
    n_det = sum(len(d) for s in sets for d in s)
    print(f"synth: {len(ids)} image(s), {len(store)} ground-truth objects, {n_det} detections from {args.groups} groups")
    return EXIT_OK


_DECODER_FLAGS = ("queries", "dropout", "embed_dim", "heads", "layers", "num_classes", "feature_tokens", "layout", "width", "height")


def _decoder_sets(args):
    from detens.decoder import DecoderConfig, GroupDecoder, make_features, run_ensemble_pass

    def pick(name, default):
        v = getattr(args, name)
        return default if v is None else v

    mode = args.mode or "group_ensemble"
    groups = pick("groups", 5)
    cfg = DecoderConfig(
        embed_dim=pick("embed_dim", 64),
        num_heads=pick("heads", 4),
        num_layers=pick("layers", 3),
        queries_per_group=pick("queries", 100),
        num_groups=groups,
        num_classes=pick("num_classes", 8),
        feature_tokens=pick("feature_tokens", 100),
        dropout_prob=pick("dropout", 0.1),
        weight_seed=args.seed,
        dropout_seed=args.seed,
    )
    model = GroupDecoder(cfg)
    features = make_features(cfg, args.seed)
    sets = run_ensemble_pass(model, features, mode, pick("layout", "batched_groups"), args.seed)
    image = ImageInfo(0, float(pick("width", 256)), float(pick("height", 192)), "decoder_input")
    return len(sets), {0: image}, {0: sets}


def cmd_pipeline(args) -> int:
    from detens.pipeline import cluster_and_aggregate

    if args.input is not None:
        given = [f"--{n.replace('_', '-')}" for n in _DECODER_FLAGS if getattr(args, n) is not None]
        if given:
            raise UsageError(f"decoder flags {', '.join(given)} cannot be combined with --input")
        if args.mode in ("mc_dropout", "mc_group_ensemble"):
            raise UsageError(f"--mode {args.mode} needs the decoder; it cannot be combined with --input")
        num_groups, images, sets = io.load_raw_detections(args.input)
        if args.groups is not None and args.groups != num_groups:
            raise UsageError(f"--groups {args.groups} disagrees with the {num_groups} groups in {args.input}")
    else:
        num_groups, images, sets = _decoder_sets(args)
    if args.mode == "deterministic":
        # a single detection set: keep group 1 only
        sets = {i: s[:1] for i, s in sets.items()}
        num_groups = 1
    strategy = AggregationStrategy.parse(args.strategy)
    ids = sorted(sets)
    results = _map_images(
        lambda i: cluster_and_aggregate(sets[i], num_groups, args.theta, strategy, args.conf_threshold, i),
        ids,
        args.threads,
    )
    dets = [d for r in results for d in r]
    io.save_prob_detections(dets, args.output / "detections.json", images)
    print(f"pipeline: {len(dets)} detections over {len(ids)} image(s), G={num_groups}, strategy {strategy.value}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from detens.metrics import evaluate
    from detens.plotting import plot_reliability

    if args.bins < 1:
        raise UsageError("--bins must be >= 1")
    if args.eps <= 0:
        raise UsageError("--eps must be positive")
    store = io.load_coco_gt(args.gt)
    dets = io.load_prob_detections(args.detections, store.images)
    report = evaluate(dets, store, args.conf_threshold, args.bins, args.match_iou, args.eps, args.threads)
    io.write_json(report.to_dict(), args.output / "report.json")
    io.write_reliability_csv(report.dece, args.output / "reliability.csv")
    plot_reliability(report.dece, args.output / "reliability.png")
    print(f"evaluate: mAP {report.map.map:.4f}  D-ECE {report.dece.dece:.4f}  PDQ {report.pdq.pdq:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from detens.bench import BENCH_FIELDS, BENCH_LAYOUTS, run_benchmark
    from detens.decoder import DecoderConfig
    from detens.plotting import plot_benchmark

    layouts = [s.strip() for s in args.layouts.split(",") if s.strip()]
    unknown = [s for s in layouts if s not in BENCH_LAYOUTS]
    if unknown or not layouts:
        raise UsageError(f"unknown layout(s) {unknown}; choose from {', '.join(BENCH_LAYOUTS)}")
    if args.repetitions < 1 or args.warmup < 0:
        raise UsageError("--repetitions must be >= 1 and --warmup >= 0")
    cfg = DecoderConfig(
        embed_dim=args.embed_dim,
        num_heads=args.heads,
        num_layers=args.layers,
        queries_per_group=args.queries,
        num_classes=args.num_classes,
        feature_tokens=args.feature_tokens,
        dropout_prob=args.dropout,
        weight_seed=args.seed,
    )
    rows = run_benchmark(cfg, args.group_counts, layouts, args.repetitions, args.warmup, args.threads)
    io.write_csv([{k: r[k] for k in BENCH_FIELDS} for r in rows], BENCH_FIELDS, args.output / "bench.csv")
    plot_benchmark(rows, args.output / "bench.png")
    for r in rows:
        print(f"bench: {r['layout']:<20} G={r['groups']}  {r['mean_ms']:9.2f} ms  (sd {r['std_ms']:.2f})")
    return EXIT_OK


ABLATE_METRICS = ("pdq", "dece", "map")


def cmd_ablate(args) -> int:
    from detens.pipeline import STRATEGIES, BenchmarkSettings, ablate_groups, ablate_strategy
    from detens.plotting import plot_ablation

    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    base = BenchmarkSettings(
        scene=_scene_params(args),
        noise=_noise(args),
        num_groups=args.groups,
        theta=args.theta,
        strategy=AggregationStrategy.parse(args.strategy),
        conf_threshold=args.conf_threshold,
    )
    seeds = range(args.seed, args.seed + args.seeds)
    if args.study == "groups":
        summaries = ablate_groups(base, seeds, args.group_counts, args.threads)
        key = "groups"
    else:
        summaries = ablate_strategy(base, seeds, STRATEGIES, args.threads)
        key = "strategy"
    rows = []
    for s in summaries:
        row: Dict = {key: s.label, "seeds": args.seeds}
        for m in ABLATE_METRICS:
            row[m] = io.round_sig(s.mean(m))
            row[f"{m}_se"] = io.round_sig(s.se(m))
        rows.append(row)
    fields = [key, "seeds"] + [f for m in ABLATE_METRICS for f in (m, f"{m}_se")]
    io.write_csv(rows, fields, args.output / f"ablate_{args.study}.csv")
    plot_ablation(rows, key, args.output / f"ablate_{args.study}.png")
    for r in rows:
        print(f"ablate: {key}={r[key]:<16} PDQ {r['pdq']:.4f}  D-ECE {r['dece']:.4f}  mAP {r['map']:.4f}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "pipeline": cmd_pipeline,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _check_common(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"detens: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, CapacityError) as exc:
        print(f"detens: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CovarianceError, json.JSONDecodeError) as exc:
        print(f"detens: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"detens: data error: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
        return EXIT_DATA
    except DetensError as exc:
        print(f"detens: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
