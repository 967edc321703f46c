import json
from pathlib import Path

import numpy as np
import pytest

from bottlemask import cli
from bottlemask.metrics import mask_l1_stats
from bottlemask.plotting import read_histogram_csv


def run_cli(argv):
    try:
        return cli.main(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "smoke"
    code = run_cli([
        "train", "--dataset", "anomaly-glyph-mnist", "--steps", "10",
        "--count", "48", "--seed", "0", "--out", str(out),
    ])
    assert code == 0
    return out


class TestGenerate:
    def test_writes_dataset_directory(self, tmp_path):
        out = tmp_path / "data"
        assert run_cli(["generate", "anchors", "12", "--seed", "1", "--out", str(out)]) == 0
        assert (out / "manifest.json").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["count"] == 12

    def test_same_seed_identical_bytes(self, tmp_path):
        for sub in ("a", "b"):
            assert run_cli(["generate", "multidigit-2", "8", "--seed", "3",
                            "--out", str(tmp_path / sub)]) == 0
        for name in ("manifest.json", "images.bin", "labels.bin", "meta.jsonl"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_invalid_dataset_name_usage_error(self, tmp_path):
        code = run_cli(["generate", "imagenet", "4", "--out", str(tmp_path / "x")])
        assert code == 2


class TestTrain:
    def test_resolved_config_persisted_with_defaults(self, trained_run):
        resolved = (trained_run / "config.resolved").read_text()
        assert "beta.mode=adaptive" in resolved
        assert "mask.arch=" in resolved
        assert "train.steps=10" in resolved
        assert (trained_run / "checkpoint" / "manifest.txt").exists()
        assert (trained_run / "metrics.jsonl").exists()

    def test_config_file_plus_flag_overrides(self, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text(
            "dataset.name=anchors\n"
            "dataset.count=32\n"
            "dataset.test_count=16\n"
            "train.steps=4\n"
        )
        out = tmp_path / "out"
        code = run_cli(["train", "--config", str(config), "--steps", "6",
                        "--out", str(out)])
        assert code == 0
        assert "train.steps=6" in (out / "config.resolved").read_text()

    def test_cond_objective_routes_to_conditional_trainer(self, tmp_path):
        out = tmp_path / "cond"
        code = run_cli([
            "train", "--dataset", "anchors", "--objective", "cond-ib",
            "--steps", "4", "--count", "24", "--out", str(out),
        ])
        assert code == 0
        manifest = (out / "checkpoint" / "manifest.txt").read_text()
        assert "config.objective=cond_ib" in manifest

    def test_unknown_config_key_exit_code_two(self, tmp_path):
        config = tmp_path / "bad.cfg"
        config.write_text("dataset.name=anchors\nwhat.ever=1\n")
        assert run_cli(["train", "--config", str(config)]) == 2


class TestEval:
    def test_report_written(self, trained_run, tmp_path):
        out = tmp_path / "eval"
        code = run_cli([
            "eval", "--checkpoint", str(trained_run / "checkpoint"),
            "--dataset", "anomaly-glyph-mnist", "--count", "32",
            "--baseline-steps", "5", "--out", str(out),
        ])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert {"masked_accuracy", "baseline_accuracy", "stability", "criteria"} <= set(report)

    def test_randomized_flag_adds_table(self, trained_run, tmp_path):
        out = tmp_path / "eval2"
        code = run_cli([
            "eval", "--checkpoint", str(trained_run / "checkpoint"),
            "--dataset", "anomaly-glyph-mnist", "--count", "32",
            "--baseline-steps", "2", "--randomized", "--out", str(out),
        ])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert "randomized" in report
        assert len(report["randomized"]["per_class_accuracy"]) == 2

    def test_missing_checkpoint_data_error(self, tmp_path):
        code = run_cli(["eval", "--checkpoint", str(tmp_path / "nope"),
                        "--dataset", "anomaly-glyph-mnist"])
        assert code == 3


class TestOracle:
    def test_suite_passes_and_writes_report(self, tmp_path):
        out = tmp_path / "oracle.jsonl"
        code = run_cli(["oracle", "--seed", "0", "--worlds", "3", "--out", str(out)])
        assert code == 0
        records = [json.loads(line) for line in out.read_text().splitlines()]
        assert all("check" in r for r in records)
        assert any(r["check"] == "objective_equivalence" for r in records)


class TestPlot:
    def test_emits_figures_and_consistent_csv(self, trained_run, tmp_path):
        out = tmp_path / "figs"
        code = run_cli(["plot", "--run", str(trained_run), "--out", str(out),
                        "--samples", "4"])
        assert code == 0
        assert (out / "masks.png").exists()
        assert (out / "l1_hist.png").exists()
        edges, counts = read_histogram_csv(out / "l1_hist.csv")
        assert edges.shape == (51,)
        assert counts.shape[0] == 2
        assert counts.sum() > 0

    def test_missing_run_dir_data_error(self, tmp_path):
        assert run_cli(["plot", "--run", str(tmp_path / "ghost")]) == 3


def test_histogram_csv_matches_stats_bin_for_bin(tmp_path):
    from bottlemask.plotting import save_l1_histograms

    rng = np.random.default_rng(0)
    masks = rng.uniform(0, 1, (80, 6, 6))
    labels = rng.integers(0, 3, 80)
    stats = mask_l1_stats(masks, labels, 3)
    save_l1_histograms(stats, tmp_path / "h.png", tmp_path / "h.csv")
    edges, counts = read_histogram_csv(tmp_path / "h.csv")
    assert np.allclose(edges, stats.bin_edges, atol=1e-6)
    assert np.array_equal(counts, stats.histograms)
