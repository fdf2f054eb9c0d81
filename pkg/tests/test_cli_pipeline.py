"""
CLI Pipeline Test Suite - hbscreen

End-to-end runs of the command-line surface on a synthetic corpus: stage
outputs, reproducibility, leakage audit and exit codes.
"""

import json

import pandas as pd
import pytest

from hbscreen.cli import HbScreenCLI, main
from hbscreen.core.audit import ConsumptionAudit, verify_no_leakage
from hbscreen.tools.dataset_service import SplitAssignment

STAGE_OUTPUTS = [
    "quality_segments.csv",
    "quality_summary.json",
    "features_segments.csv",
    "features_clean.csv",
    "dropped_columns.json",
    "subject_features.csv",
    "split.json",
    "model.json",
    "train_trace.csv",
    "importance_gain.csv",
    "predictions.csv",
    "metrics.json",
    "scatter.csv",
    "bland_altman.csv",
    "importance_shap.csv",
    "importance_category.csv",
    "importance_wavelength.csv",
    "screening.csv",
    "sensitivity.csv",
    "screening_summary.json",
    "audit.jsonl",
]


def write_config(path, out_dir, **overrides):
    payload = {"seed": 42, "paths": {"out_dir": str(out_dir)}, "synth": {"n_subjects": 100, "duration_s": 15.0}}
    payload.update(overrides)
    path.write_text(json.dumps(payload))
    return path


def error_lines(capsys):
    return [line for line in capsys.readouterr().err.splitlines() if line.startswith("error=")]


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    config = write_config(root / "run.json", root / "out")
    assert main(["synth", "--config", str(config)]) == 0
    assert main(["pipeline", "--config", str(config)]) == 0
    return config, root / "out"


@pytest.mark.integration
@pytest.mark.slow
class TestPipeline:
    def test_all_outputs_written(self, pipeline_run):
        _, out = pipeline_run
        for name in STAGE_OUTPUTS:
            assert (out / name).exists(), name
        split = SplitAssignment.load(out / "split.json")
        assert len(split.test) == 20
        assert len(list((out / "explanations").glob("*.json"))) == 20
        assert len(list(out.glob("dependence_*.csv"))) == 3

    def test_synthetic_accuracy(self, pipeline_run):
        _, out = pipeline_run
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["seed"] == 42
        assert metrics["test"]["n"] == 20
        assert metrics["test"]["r2"] >= 0.9
        assert metrics["bland_altman"]["loa_low"] <= metrics["bland_altman"]["loa_high"]

    def test_segment_table(self, pipeline_run):
        _, out = pipeline_run
        segments = pd.read_csv(out / "features_segments.csv", dtype={"subject_id": str})
        assert len(segments) == 300
        assert segments.shape[1] == 80
        quality = pd.read_csv(out / "quality_segments.csv")
        assert len(quality) == 1200

    def test_no_leakage(self, pipeline_run):
        _, out = pipeline_run
        split = SplitAssignment.load(out / "split.json")
        assert verify_no_leakage(out / "audit.jsonl", split.test) == set()
        events = ConsumptionAudit(out / "audit.jsonl").events()
        assert [e.stage for e in events] == [
            "quality", "features", "aggregate", "train", "predict", "evaluate", "explain", "screen",
        ]
        train_event = next(e for e in events if e.stage == "train")
        assert train_event.role == "train"
        assert train_event.subject_ids == sorted(split.train)

    def test_screening_outputs(self, pipeline_run):
        _, out = pipeline_run
        screening = pd.read_csv(out / "screening.csv")
        assert list(screening.columns) == ["subject_id", "predicted_hb_g_l", "sex", "status"]
        assert len(screening) == 20
        sensitivity = pd.read_csv(out / "sensitivity.csv")
        assert list(sensitivity.columns) == ["offset_g_l", "anemic_count"]
        assert sensitivity["anemic_count"].is_monotonic_increasing
        summary = json.loads((out / "screening_summary.json").read_text())
        assert summary["threshold_table"]["version"] == "v1"
        assert sum(summary["status_distribution"].values()) == 20

    def test_rerun_is_byte_identical(self, pipeline_run):
        config, out = pipeline_run
        before = {name: (out / name).read_bytes() for name in ("metrics.json", "model.json", "split.json")}
        assert main(["pipeline", "--config", str(config)]) == 0
        for name, content in before.items():
            assert (out / name).read_bytes() == content, name

    def test_repeated_splits(self, pipeline_run, tmp_path):
        config, out = pipeline_run
        fast = write_config(tmp_path / "fast.json", out, gbm={"n_trees": 20})
        assert main(["evaluate", "--config", str(fast), "--repeats", "3"]) == 0
        summary = json.loads((out / "metrics.json").read_text())["repeated_splits"]
        assert summary["n_repeats"] == 3
        assert [run["seed"] for run in summary["runs"]] == [42, 43, 44]


@pytest.mark.integration
class TestSmallCorpus:
    def test_single_test_subject_reports_null_metrics(self, tmp_path, capsys):
        config = write_config(tmp_path / "run.json", tmp_path / "out", synth={"n_subjects": 6, "duration_s": 10.0})
        assert main(["synth", "--config", str(config)]) == 0
        assert main(["pipeline", "--config", str(config)]) == 0
        assert error_lines(capsys) == []

        out = tmp_path / "out"
        split = SplitAssignment.load(out / "split.json")
        assert (len(split.train), len(split.test)) == (5, 1)
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["test"] is None
        assert metrics["bland_altman"] is None
        assert metrics["train"]["n"] == 5
        scatter = pd.read_csv(out / "scatter.csv")
        assert scatter["split"].value_counts().to_dict() == {"train": 5, "test": 1}
        assert len(pd.read_csv(out / "bland_altman.csv")) == 1
        assert (out / "screening_summary.json").exists()

        assert main(["evaluate", "--config", str(config), "--repeats", "2"]) == 0
        summary = json.loads((out / "metrics.json").read_text())["repeated_splits"]
        assert [run["mae"] for run in summary["runs"]] == [None, None]
        assert summary["test_mae_mean"] is None


@pytest.mark.integration
@pytest.mark.slow
class TestNoisyCorpus:
    def test_recoverable_under_noise(self, tmp_path):
        config = write_config(
            tmp_path / "run.json", tmp_path / "out", synth={"n_subjects": 100, "duration_s": 15.0, "noise_sd": 0.05}
        )
        assert main(["synth", "--config", str(config)]) == 0
        assert main(["pipeline", "--config", str(config)]) == 0
        metrics = json.loads((tmp_path / "out" / "metrics.json").read_text())
        assert metrics["test"]["r2"] >= 0.7


class TestExitCodes:
    def test_no_command_prints_help(self):
        assert HbScreenCLI().run([]) == 0

    def test_missing_input(self, tmp_path, capsys):
        assert main(["train", "--out-dir", str(tmp_path / "empty")]) == 3
        lines = error_lines(capsys)
        assert len(lines) == 1
        assert lines[0].startswith("error=missing_input message=")

    def test_malformed_metadata(self, tmp_path, capsys):
        out = tmp_path / "out"
        (out / "signals").mkdir(parents=True)
        (out / "metadata.csv").write_text("id,age\nS001,40\n")
        assert main(["features", "--out-dir", str(out)]) == 4
        assert error_lines(capsys)[0].startswith("error=malformed_input")

    def test_invalid_config_value(self, tmp_path, capsys):
        config = write_config(tmp_path / "bad.json", tmp_path / "out", gbm={"learning_rate": 2.0})
        assert main(["train", "--config", str(config)]) == 2
        assert error_lines(capsys)[0].startswith("error=config")

    def test_config_not_json(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text("{seed: 1")
        assert main(["train", "--config", str(tmp_path / "bad.json")]) == 4
        assert error_lines(capsys)[0].startswith("error=malformed_input")

    def test_unreadable_model(self, tmp_path, capsys):
        out = tmp_path / "out"
        out.mkdir()
        (out / "model.json").write_text('{"format": "hbscreen-gbm", "version": 9}')
        pd.DataFrame(
            {"subject_id": ["S001"], "x_mean": [1.0], "age": [30.0], "sex_encoded": [1], "n_segments": [2], "hb_ref": [140.0]}
        ).to_csv(out / "subject_features.csv", index=False)
        assert main(["predict", "--out-dir", str(out)]) == 4
        line = error_lines(capsys)[0]
        assert line.startswith("error=model_format")
        assert "expected version 1" in line
