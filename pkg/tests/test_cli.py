import csv
import json
import os

import numpy as np
import pytest

from detens.cli import main


def run(tmp_path, *argv):
    return main(["--output", str(tmp_path), *map(str, argv)])


def load(path):
    return json.loads(path.read_text())


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


ZERO_NOISE = ("--sigma", 0, "--conf-jitter", 0, "--miss", 0, "--fp-rate", 0)


class TestSynth:
    def test_arity(self, tmp_path):
        assert run(tmp_path, "synth", "--objects", 5, "--groups", 5, "--seed", 1, "--fp-rate", 0) == 0
        gt = load(tmp_path / "gt.json")
        raw = load(tmp_path / "raw_detections.json")
        assert len(gt["annotations"]) == 5
        assert raw["num_groups"] == 5 and len(raw["detections"]) <= 25

    def test_fp_counted_separately(self, tmp_path):
        run(tmp_path, "synth", "--objects", 5, "--miss", 1, "--fp-rate", 3, "--seed", 2)
        raw = load(tmp_path / "raw_detections.json")
        assert all(d["score"] <= 0.5 for d in raw["detections"])

    def test_all_missed_is_empty(self, tmp_path):
        assert run(tmp_path, "synth", "--objects", 5, "--miss", 1, "--fp-rate", 0) == 0
        assert load(tmp_path / "raw_detections.json")["detections"] == []

    def test_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert main(["synth", "--images", "3", "--seed", "7", "--output", str(d)]) == 0
        for name in ("gt.json", "raw_detections.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_threads_do_not_change_output(self, tmp_path):
        run(tmp_path / "one", "synth", "--images", 4, "--threads", 1)
        run(tmp_path / "four", "synth", "--images", 4, "--threads", 4)
        assert (tmp_path / "one" / "raw_detections.json").read_bytes() == (tmp_path / "four" / "raw_detections.json").read_bytes()

    def test_global_flags_after_subcommand(self, tmp_path):
        assert main(["synth", "--seed", "3", "--output", str(tmp_path)]) == 0
        assert main(["--seed", "3", "--output", str(tmp_path / "b"), "synth"]) == 0
        assert (tmp_path / "gt.json").read_bytes() == (tmp_path / "b" / "gt.json").read_bytes()


class TestPipeline:
    def test_zero_noise_closure(self, tmp_path):
        run(tmp_path, "synth", "--objects", 6, "--groups", 5, *ZERO_NOISE)
        assert run(tmp_path, "pipeline", "--input", tmp_path / "raw_detections.json") == 0
        dets = load(tmp_path / "detections.json")["detections"]
        gt = load(tmp_path / "gt.json")["annotations"]
        assert len(dets) == len(gt) == 6
        assert all(d["support"] == 5 for d in dets)
        np.testing.assert_allclose(sorted(d["bbox"] for d in dets), sorted(g["bbox"] for g in gt), atol=1e-9)

    def test_singletons_dropped(self, tmp_path):
        # one group sees each object: alpha = 0.2 so even conf 1.0 scales to 0.2 < 0.3
        run(tmp_path, "synth", "--objects", 4, "--groups", 5, "--conf-base", 1, *ZERO_NOISE[:4], "--miss", 0, "--fp-rate", 2)
        raw = load(tmp_path / "raw_detections.json")
        raw["detections"] = [d for d in raw["detections"] if d["group"] == 1]
        (tmp_path / "raw_detections.json").write_text(json.dumps(raw))
        rc = run(tmp_path, "pipeline", "--input", tmp_path / "raw_detections.json", "--strategy", "max_conf_scaled", "--conf-threshold", 0.3)
        assert rc == 0
        assert load(tmp_path / "detections.json")["detections"] == []

    def test_deterministic_mode(self, tmp_path):
        run(tmp_path, "synth", "--images", 2, "--groups", 5)
        assert run(tmp_path, "pipeline", "--input", tmp_path / "raw_detections.json", "--mode", "deterministic") == 0
        dets = load(tmp_path / "detections.json")["detections"]
        assert dets
        assert all(d["support"] == 1 and d["covariance"] == [0.0] * 16 for d in dets)

    def test_decoder_path(self, tmp_path):
        rc = run(tmp_path, "pipeline", "--queries", 8, "--groups", 3, "--embed-dim", 16, "--heads", 2, "--layers", 1, "--feature-tokens", 10, "--conf-threshold", 0)
        assert rc == 0
        dets = load(tmp_path / "detections.json")["detections"]
        # every query of every group lands in exactly one cluster
        assert sum(d["support"] for d in dets) == 8 * 3

    def test_decoder_path_deterministic(self, tmp_path):
        flags = ("--queries", 6, "--embed-dim", 16, "--heads", 2, "--layers", 1, "--feature-tokens", 8, "--seed", 5)
        run(tmp_path / "a", "pipeline", *flags, "--mode", "mc_dropout")
        run(tmp_path / "b", "pipeline", *flags, "--mode", "mc_dropout")
        assert (tmp_path / "a" / "detections.json").read_bytes() == (tmp_path / "b" / "detections.json").read_bytes()

    @pytest.mark.parametrize(
        "extra",
        [("--queries", 10), ("--mode", "mc_dropout"), ("--groups", 3), ("--layout", "masked_joint")],
    )
    def test_conflicts_with_input(self, tmp_path, extra, capsys):
        run(tmp_path, "synth", "--groups", 5)
        capsys.readouterr()
        assert run(tmp_path, "pipeline", "--input", tmp_path / "raw_detections.json", *extra) == 1
        err = capsys.readouterr().err
        assert err.count("\n") == 1 and err.startswith("detens:")
        assert not (tmp_path / "detections.json").exists()

    def test_bad_decoder_config(self, tmp_path):
        assert run(tmp_path, "pipeline", "--embed-dim", 10, "--heads", 3) == 1


def _pipeline_outputs(tmp_path, *synth_flags):
    run(tmp_path, "synth", *synth_flags)
    run(tmp_path, "pipeline", "--input", tmp_path / "raw_detections.json")
    return tmp_path / "detections.json", tmp_path / "gt.json"


class TestEvaluate:
    def test_perfect(self, tmp_path):
        dets, gt = _pipeline_outputs(tmp_path, "--images", 3, *ZERO_NOISE)
        assert run(tmp_path, "evaluate", "--detections", dets, "--gt", gt) == 0
        report = load(tmp_path / "report.json")
        assert report["map"]["map"] == pytest.approx(1.0)
        for name in ("report.json", "reliability.csv", "reliability.png"):
            assert (tmp_path / name).stat().st_size > 0
        assert len(read_csv(tmp_path / "reliability.csv")) == 10

    def test_empty_detections(self, tmp_path):
        dets, gt = _pipeline_outputs(tmp_path, "--images", 2, "--miss", 1, "--fp-rate", 0)
        assert load(dets)["detections"] == []
        assert run(tmp_path, "evaluate", "--detections", dets, "--gt", gt) == 0
        report = load(tmp_path / "report.json")
        assert report["map"]["map"] == 0.0
        assert report["pdq"]["pdq"] == 0.0

    def test_deterministic_report(self, tmp_path):
        dets, gt = _pipeline_outputs(tmp_path, "--images", 3)
        run(tmp_path / "a", "evaluate", "--detections", dets, "--gt", gt)
        run(tmp_path / "b", "evaluate", "--detections", dets, "--gt", gt, "--threads", 3)
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
        assert (tmp_path / "a" / "reliability.csv").read_bytes() == (tmp_path / "b" / "reliability.csv").read_bytes()

    def test_missing_file(self, tmp_path, capsys):
        assert run(tmp_path, "evaluate", "--detections", tmp_path / "nope.json", "--gt", tmp_path / "nope.json") == 2
        assert capsys.readouterr().err.count("\n") == 1
        assert os.listdir(tmp_path) == []

    def test_corrupt_detections_leave_no_output(self, tmp_path):
        dets, gt = _pipeline_outputs(tmp_path, "--images", 1)
        dets.write_text('{"detections": [{"image_id": 0}]}')
        before = sorted(os.listdir(tmp_path))
        assert run(tmp_path, "evaluate", "--detections", dets, "--gt", gt) == 2
        assert sorted(os.listdir(tmp_path)) == before

    def test_dangling_image(self, tmp_path):
        dets, gt = _pipeline_outputs(tmp_path, "--images", 1)
        data = load(dets)
        data.pop("images")
        data["detections"] = [dict(data["detections"][0], image_id=999)]
        dets.write_text(json.dumps(data))
        assert run(tmp_path, "evaluate", "--detections", dets, "--gt", gt) == 2


class TestUsage:
    @pytest.mark.parametrize(
        "argv",
        [
            ["bogus"],
            [],
            ["synth", "--groups", "0"],
            ["synth", "--miss", "1.5"],
            ["synth", "--threads", "0"],
            ["evaluate", "--gt", "x.json"],
            ["bench", "--layouts", "nope"],
            ["ablate", "neither"],
            ["ablate", "groups", "--seeds", "0"],
        ],
    )
    def test_usage_errors(self, tmp_path, argv, capsys):
        assert run(tmp_path, *argv) == 1
        err = capsys.readouterr().err
        assert err.count("\n") == 1
        assert os.listdir(tmp_path) == []


class TestAblate:
    def test_groups_study(self, tmp_path):
        assert run(tmp_path, "ablate", "groups", "--seeds", 2) == 0
        rows = read_csv(tmp_path / "ablate_groups.csv")
        assert [r["groups"] for r in rows] == ["1", "3", "5", "7", "9"]
        assert set(rows[0]) == {"groups", "seeds", "pdq", "pdq_se", "dece", "dece_se", "map", "map_se"}
        assert (tmp_path / "ablate_groups.png").stat().st_size > 0

    def test_strategy_study(self, tmp_path):
        assert run(tmp_path, "ablate", "strategy", "--seeds", 2) == 0
        rows = read_csv(tmp_path / "ablate_strategy.csv")
        assert len(rows) == 3
        assert all(0.0 <= float(r["pdq"]) <= 1.0 for r in rows)

    def test_reproducible(self, tmp_path):
        run(tmp_path / "a", "ablate", "strategy", "--seeds", 2, "--seed", 4)
        run(tmp_path / "b", "ablate", "strategy", "--seeds", 2, "--seed", 4, "--threads", 2)
        assert (tmp_path / "a" / "ablate_strategy.csv").read_bytes() == (tmp_path / "b" / "ablate_strategy.csv").read_bytes()


class TestBench:
    def test_small_run(self, tmp_path):
        rc = run(
            tmp_path, "bench", "--group-counts", "1,2", "--repetitions", 2, "--warmup", 0,
            "--queries", 4, "--embed-dim", 8, "--heads", 2, "--layers", 1, "--feature-tokens", 6,
        )
        assert rc == 0
        rows = read_csv(tmp_path / "bench.csv")
        assert len(rows) == 8
        assert {r["layout"] for r in rows} == {"masked_joint", "batched_groups", "sequential_groups", "sequential_ensemble"}
        assert all(float(r["mean_ms"]) > 0 and r["threads"] == "1" and r["repetitions"] == "2" for r in rows)
        assert (tmp_path / "bench.png").stat().st_size > 0
