import json
import math

import jsonschema
import numpy as np
import pytest
from scipy.stats import multivariate_normal

from detens.errors import DanglingReferenceError, DataError
from detens.metrics import REPORT_SCHEMA, evaluate
from detens.metrics.coco_map import COCO_IOU_THRESHOLDS, compute_map, interpolated_ap
from detens.metrics.common import greedy_match
from detens.metrics.dece import compute_dece, match_detections, reliability_bins
from detens.metrics.hungarian import assignment_cost, hungarian_assign
from detens.metrics.pdq import bivariate_normal_cdf, compute_pdq, spatial_probability

from helpers import int_box, make_store, pdet
from oracles import brute_force_ap, brute_force_assignment, brute_force_match


class TestHungarian:
    def test_two_by_two(self):
        a = hungarian_assign([[1, 2], [2, 1]])
        assert a == {0: 0, 1: 1}
        assert assignment_cost([[1, 2], [2, 1]], a) == 2

    def test_zero_diagonal(self):
        cost = np.ones((3, 3)) - np.eye(3)
        assert hungarian_assign(cost) == {0: 0, 1: 1, 2: 2}

    def test_empty(self):
        assert hungarian_assign(np.zeros((0, 3))) == {}

    def test_rectangular_partial(self):
        a = hungarian_assign([[5, 1, 9]])
        assert a == {0: 1}
        a = hungarian_assign([[5], [1], [9]])
        assert a == {1: 0}

    def test_non_finite(self):
        with pytest.raises(ValueError):
            hungarian_assign([[1, np.inf], [0, 1]])

    def test_brute_force_500(self, rng):
        for _ in range(500):
            r, c = rng.integers(1, 8, size=2)
            cost = rng.normal(size=(r, c)) * rng.choice([1, 10, 100])
            if rng.random() < 0.3:
                cost = np.round(cost)  # ties
            a = hungarian_assign(cost)
            assert len(a) == min(r, c)
            assert len(set(a.values())) == len(a)
            assert assignment_cost(cost, a) == pytest.approx(brute_force_assignment(cost), abs=1e-9)

    def test_beats_random_permutations(self, rng):
        cost = rng.uniform(size=(30, 30))
        best = assignment_cost(cost, hungarian_assign(cost))
        for _ in range(200):
            perm = rng.permutation(30)
            assert best <= cost[np.arange(30), perm].sum() + 1e-12


class TestMap:
    def test_perfect(self):
        store = make_store({0: [((10, 10, 30, 30), 1)]})
        assert compute_map([pdet((10, 10, 30, 30), 1, 0.9)], store).map == 1.0

    def test_miss(self):
        store = make_store({0: [((10, 10, 30, 30), 1)]})
        assert compute_map([], store).map == 0.0

    def test_tp_before_fp(self):
        store = make_store({0: [((10, 10, 30, 30), 1)]})
        dets = [pdet((10, 10, 30, 30), 1, 0.9), pdet((40, 40, 50, 50), 1, 0.8)]
        assert compute_map(dets, store).per_threshold[0.5] == 1.0

    def test_fp_before_tp(self):
        # precision 1/2 at recall 1 for every recall level
        store = make_store({0: [((10, 10, 30, 30), 1)]})
        dets = [pdet((10, 10, 30, 30), 1, 0.7), pdet((40, 40, 50, 50), 1, 0.8)]
        assert compute_map(dets, store).per_threshold[0.5] == pytest.approx(0.5)

    def test_class_without_gt_ignored(self):
        store = make_store({0: [((10, 10, 30, 30), 1)]})
        dets = [pdet((10, 10, 30, 30), 1, 0.9), pdet((10, 10, 30, 30), 2, 0.95)]
        assert compute_map(dets, store).map == 1.0

    def test_unknown_image(self):
        store = make_store({0: [((10, 10, 30, 30), 1)]})
        with pytest.raises(DanglingReferenceError):
            compute_map([pdet((10, 10, 30, 30), 1, 0.9, image_id=5)], store)

    def test_thresholds(self):
        assert COCO_IOU_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)

    def test_interpolated_ap_edges(self):
        assert math.isnan(interpolated_ap([True], 0))
        assert interpolated_ap([], 3) == 0.0
        assert interpolated_ap([True, True], 2) == 1.0

    def test_brute_force_200_scenes(self, rng):
        for _ in range(200):
            scene, dets = micro_scene(rng)
            store = make_store(scene)
            got = compute_map(dets, store)
            assert abs(got.map - oracle_map(scene, dets)) <= 1e-9

    def test_greedy_match_oracle(self, rng):
        for _ in range(200):
            gts = [(int_box(rng), int(rng.integers(1, 3))) for _ in range(rng.integers(0, 6))]
            dets = [(int_box(rng), int(rng.integers(1, 3)), float(rng.uniform())) for _ in range(rng.integers(0, 9))]
            thr = float(rng.choice([0.1, 0.5, 0.75]))
            got = greedy_match(np.array([d[0] for d in dets]).reshape(-1, 4), [d[1] for d in dets], [d[2] for d in dets], np.array([g[0] for g in gts]).reshape(-1, 4), [g[1] for g in gts], thr)
            assert got.tolist() == brute_force_match(dets, gts, thr)


def micro_scene(rng):
    scene = {}
    dets = []
    for image_id in range(int(rng.integers(1, 3))):
        gts = [(int_box(rng), int(rng.integers(1, 3))) for _ in range(rng.integers(0, 6))]
        scene[image_id] = gts
        for _ in range(rng.integers(0, 9)):
            if gts and rng.random() < 0.6:
                # perturbed copy of a GT
                b, lab = gts[rng.integers(len(gts))]
                d = rng.integers(-3, 4, size=4)
                box = (b[0] + d[0], b[1] + d[1], max(b[2] + d[2], b[0] + d[0] + 1), max(b[3] + d[3], b[1] + d[1] + 1))
            else:
                box, lab = int_box(rng), int(rng.integers(1, 3))
            dets.append(pdet(box, lab, float(rng.uniform(0.01, 1)), image_id))
    if not any(scene.values()):
        scene[0] = [((1, 1, 9, 9), 1)]
    return scene, dets


def oracle_map(scene, dets):
    from detens.geometry import BoxFormat, convert

    classes = sorted({lab for gts in scene.values() for _, lab in gts})
    aps = []
    for thr in COCO_IOU_THRESHOLDS:
        per_class = []
        for k in classes:
            entries = []
            for image_id, gts in scene.items():
                mine = [d for d in dets if d.image_id == image_id]
                tuples = [(convert(d.box, BoxFormat.XYXY, (64, 64)).coords, d.label, d.confidence) for d in mine]
                flags = brute_force_match(tuples, gts, thr)
                entries += [(t[2], f) for t, f in zip(tuples, flags) if t[1] == k]
            num_gt = sum(1 for gts in scene.values() for _, lab in gts if lab == k)
            per_class.append(brute_force_ap(entries, num_gt))
        aps.append(np.mean(per_class))
    return float(np.mean(aps))


class TestDece:
    def test_perfect(self):
        store = make_store({0: [((10, 10, 30, 30), 1), ((40, 40, 60, 60), 2)]})
        dets = [pdet((10, 10, 30, 30), 1, 1.0), pdet((40, 40, 60, 60), 2, 1.0)]
        assert compute_dece(dets, store).dece == 0.0

    def test_half_tp(self):
        store = make_store({0: [((10, 10, 30, 30), 1)]})
        dets = [pdet((10, 10, 30, 30), 1, 1.0), pdet((40, 40, 60, 60), 1, 1.0)]
        assert compute_dece(dets, store).dece == 0.5

    def test_no_samples(self):
        store = make_store({0: [((10, 10, 30, 30), 1)]})
        res = compute_dece([pdet((10, 10, 30, 30), 1, 0.1)], store, conf_threshold=0.3)
        assert res.dece == 0.0 and res.no_samples
        assert all(b.count == 0 for b in res.bins)

    def test_single_bin_identity(self, rng):
        for _ in range(100):
            scene, dets = micro_scene(rng)
            store = make_store(scene)
            confs, flags = match_detections(dets, store, 0.3, 0.5)
            res = compute_dece(dets, store, num_bins=1)
            expected = abs(flags.mean() - confs.mean()) if len(confs) else 0.0
            assert res.dece == expected

    def test_bins_partition(self, rng):
        confs = rng.uniform(size=500)
        confs[:3] = [0.0, 1.0, 0.5]
        res = reliability_bins(confs, rng.random(500) < 0.5, 10)
        assert sum(b.count for b in res.bins) == 500
        assert res.bins[0].lo == 0.0 and res.bins[-1].hi == 1.0
        assert all(a.hi == b.lo for a, b in zip(res.bins, res.bins[1:]))
        for b in res.bins:
            assert b.lo <= b.mean_conf <= b.hi

    def test_weighted_gap_by_hand(self):
        # bin [0.8,0.9): two at 0.85, one TP -> gap 0.35; bin [0.3,0.4): one FP at 0.3 -> gap 0.3
        res = reliability_bins([0.85, 0.85, 0.3], [True, False, False], 10)
        assert res.dece == pytest.approx(2 / 3 * 0.35 + 1 / 3 * 0.3, abs=1e-15)


class TestPdq:
    def test_fn_only(self):
        store = make_store({0: [((10, 10, 30, 30), 1)]})
        res = compute_pdq([], store)
        assert res.pdq == 0.0 and res.fn == 1

    def test_fp_only(self):
        store = make_store({0: []})
        res = compute_pdq([pdet((10, 10, 30, 30), 1, 0.9)], store)
        assert res.pdq == 0.0 and res.fp == 1

    def test_epsilon_limit(self):
        store = make_store({0: [((10, 12, 30, 40), 1), ((35, 5, 60, 20), 2)]})
        dets = [pdet((10, 12, 30, 40), 1, 1.0), pdet((35, 5, 60, 20), 2, 1.0)]
        values = [compute_pdq(dets, store, eps=e).pdq for e in (1e-1, 1e-2, 1e-3, 1e-4)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert values[-1] > 1 - 1e-9

    def test_label_quality_is_confidence(self):
        store = make_store({0: [((10, 12, 30, 40), 1)]})
        res = compute_pdq([pdet((10, 12, 30, 40), 1, 0.64)], store, eps=1e-4)
        assert res.pdq == pytest.approx(0.8, abs=1e-9)
        assert res.avg_label_quality == 0.64

    def test_wrong_class_unassigned(self):
        store = make_store({0: [((10, 12, 30, 40), 1)]})
        res = compute_pdq([pdet((10, 12, 30, 40), 2, 0.9)], store)
        assert (res.tp, res.fp, res.fn, res.pdq) == (0, 1, 1, 0.0)

    def test_threshold_before_assignment(self):
        store = make_store({0: [((10, 12, 30, 40), 1)]})
        res = compute_pdq([pdet((10, 12, 30, 40), 1, 0.2)], store, conf_threshold=0.3)
        assert (res.tp, res.fp, res.fn) == (0, 0, 1)

    def test_missing_covariance(self):
        store = make_store({0: [((10, 12, 30, 40), 1)]})
        d = pdet((10, 12, 30, 40), 1, 0.9)
        d.covariance = None
        with pytest.raises(DataError):
            compute_pdq([d], store)

    def test_bivariate_cdf_against_scipy(self, rng):
        for _ in range(40):
            rho = float(rng.uniform(-0.99, 0.99))
            h, k = rng.normal(0, 2, size=(2, 25))
            h[:3] = [0.0, 0.0, 1.0]
            k[:3] = [0.0, 1.5, 0.0]
            mvn = multivariate_normal(mean=[0, 0], cov=[[1, rho], [rho, 1]])
            expected = mvn.cdf(np.column_stack([h, k]))
            assert np.abs(bivariate_normal_cdf(h, k, rho) - expected).max() < 1e-7

    def test_heat_range(self, rng):
        d = pdet((10, 12, 30, 40), 1, 0.9, cov=np.diag([2e-4, 1e-4, 3e-4, 1e-4]))
        heat = spatial_probability(d, make_store({0: []}).images[0])
        assert heat.shape == (64, 64)
        assert heat.min() >= 0 and heat.max() <= 1
        assert heat[26, 20] > 0.99 and heat[60, 60] < 1e-6

    def test_inflation_never_helps_exact_boxes(self, rng):
        for _ in range(10):
            gts = [(int_box(rng), 1) for _ in range(3)]
            store = make_store({0: gts})
            covs = []
            for _ in gts:
                a = rng.normal(size=(4, 4)) * 3e-3
                covs.append(a @ a.T)
            prev = None
            for s in (1.0, 1.5, 2.0, 4.0):
                dets = [pdet(b, 1, 0.9, cov=s * c) for (b, _), c in zip(gts, covs)]
                res = compute_pdq(dets, store)
                assert res.tp == len(gts)
                if prev is not None:
                    assert res.pdq <= prev + 1e-12
                prev = res.pdq

    def test_counts_consistent(self, rng):
        for _ in range(20):
            scene, dets = micro_scene(rng)
            store = make_store(scene)
            res = compute_pdq(dets, store, conf_threshold=0.0)
            for k, c in res.per_class.items():
                assert c["tp"] + c["fn"] == store.gt_counts().get(k, 0)
            assert 0.0 <= res.pdq <= 1.0

    def test_threads_match_serial(self, rng):
        scene, dets = micro_scene(rng)
        store = make_store(scene)
        assert compute_pdq(dets, store, threads=3).pdq == compute_pdq(dets, store, threads=1).pdq


class TestRescaling:
    def test_map_and_dece_invariant(self, rng):
        for _ in range(20):
            scene, dets = micro_scene(rng)
            big_scene = {i: [(tuple(2 * v for v in b), lab) for b, lab in gts] for i, gts in scene.items()}
            small = make_store(scene)
            big = make_store(big_scene, size=(128, 128))
            assert compute_map(dets, small).map == pytest.approx(compute_map(dets, big).map, abs=1e-12)
            assert compute_dece(dets, small).dece == pytest.approx(compute_dece(dets, big).dece, abs=1e-12)

    def test_pdq_approximately_invariant(self):
        # pixel sampling makes this approximate; the corner floor scales with the image
        scene = {0: [((8, 8, 24, 30), 1), ((30, 34, 56, 60), 2)]}
        cov = np.diag([1e-4, 2e-4, 1e-4, 2e-4])
        dets = [pdet((9, 7, 25, 29), 1, 0.9, cov=cov), pdet((31, 35, 55, 58), 2, 0.8, cov=cov)]
        small = compute_pdq(dets, make_store(scene), eps=1.0).pdq
        big_scene = {0: [(tuple(2 * v for v in b), lab) for b, lab in scene[0]]}
        big = compute_pdq(dets, make_store(big_scene, size=(128, 128)), eps=2.0).pdq
        assert big == pytest.approx(small, abs=0.03)


class TestReport:
    def test_schema_on_random_runs(self, rng):
        for _ in range(50):
            scene, dets = micro_scene(rng)
            report = evaluate(dets, make_store(scene)).to_dict()
            jsonschema.validate(json.loads(json.dumps(report)), REPORT_SCHEMA)

    def test_empty_detections(self):
        report = evaluate([], make_store({0: [((10, 10, 30, 30), 1)]}))
        assert report.map.map == 0.0 and report.pdq.pdq == 0.0
        jsonschema.validate(report.to_dict(), REPORT_SCHEMA)
