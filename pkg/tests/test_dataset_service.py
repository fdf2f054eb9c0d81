"""
Dataset Service Test Suite - hbscreen

Tests metadata and signal CSV ingestion, subject-level aggregation and the
Hb-stratified subject-wise split.
"""

import json

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from hbscreen.core.exceptions import (
    FeatureMismatchError,
    MalformedInputError,
    MissingInputError,
    MissingMetadataError,
    TooFewSubjectsError,
)
from hbscreen.tools.dataset_service import (
    DatasetService,
    SplitAssignment,
    SubjectFeatureTable,
    SubjectMeta,
    aggregate_subjects,
    load_corpus,
    load_metadata,
    load_record,
    save_metadata,
    save_record,
    split_subjects,
)
from hbscreen.tools.feature_extraction import FeatureTable
from hbscreen.tools.signal_processing import WAVELENGTHS

from .conftest import sine_record


def subject_table(hb_values, unlabeled=0):
    """Minimal subject table: ids plus hb_ref (NaN for unlabeled subjects)."""
    n = len(hb_values)
    ids = [f"S{i:03d}" for i in range(n + unlabeled)]
    hb = list(hb_values) + [np.nan] * unlabeled
    return SubjectFeatureTable(pd.DataFrame({"subject_id": ids, "x_mean": np.arange(n + unlabeled, dtype=float), "hb_ref": hb}))


def write_metadata(path, rows, header="subject_id,age,sex,hb_g_per_l"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")


class TestSubjectMeta:
    def test_sex_normalized(self):
        assert SubjectMeta(subject_id="a", age=30, sex="M").sex == "male"
        assert SubjectMeta(subject_id="a", age=30, sex=" f ").sex == "female"
        assert SubjectMeta(subject_id="a", age=30, sex="male").sex_encoded == 1

    def test_blank_hb_is_unlabeled(self):
        assert not SubjectMeta(subject_id="a", age=30, sex="F", hb_ref="").labeled
        assert not SubjectMeta(subject_id="a", age=30, sex="F", hb_ref=float("nan")).labeled
        assert SubjectMeta(subject_id="a", age=30, sex="F", hb_ref=121.5).labeled

    def test_hb_sanity_range(self):
        with pytest.raises(ValidationError):
            SubjectMeta(subject_id="a", age=30, sex="F", hb_ref=12.5)  # g/dL, not g/L


class TestMetadataCsv:
    def test_load(self, tmp_path):
        path = tmp_path / "metadata.csv"
        write_metadata(path, ["S002,41,F,118.0,no", "S001,35,M,,yes"], header="subject_id,age,sex,hb_g_per_l,smoker")
        metas = load_metadata(path)
        assert [m.subject_id for m in metas] == ["S002", "S001"]
        assert metas[0].hb_ref == 118.0
        assert metas[1].hb_ref is None

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "metadata.csv"
        write_metadata(path, ["S001,35,M,140"], header="id,age,sex,hb")
        with pytest.raises(MalformedInputError, match="malformed metadata header"):
            load_metadata(path)

    def test_bad_row_reports_line(self, tmp_path):
        path = tmp_path / "metadata.csv"
        write_metadata(path, ["S001,35,M,140", "S002,40,X,120"])
        with pytest.raises(MalformedInputError, match="line 3"):
            load_metadata(path)

    def test_duplicate_subject(self, tmp_path):
        path = tmp_path / "metadata.csv"
        write_metadata(path, ["S001,35,M,140", "S001,40,F,120"])
        with pytest.raises(MalformedInputError, match="duplicate"):
            load_metadata(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingInputError):
            load_metadata(tmp_path / "nope.csv")

    def test_save_then_load(self, tmp_path):
        metas = [SubjectMeta(subject_id="S001", age=50, sex="female", hb_ref=111.25)]
        save_metadata(metas, tmp_path / "m.csv")
        assert load_metadata(tmp_path / "m.csv") == metas


class TestSignalCsv:
    def setup_method(self):
        self.meta = SubjectMeta(subject_id="S001", age=40, sex="M", hb_ref=130)

    def test_fs_inferred_from_time_column(self, tmp_path):
        record = sine_record(fs=125.0, n_samples=800)
        save_record(record, tmp_path / "S001.csv")
        loaded = load_record(tmp_path / "S001.csv", self.meta)
        assert loaded.fs == pytest.approx(125.0)
        for w in WAVELENGTHS:
            np.testing.assert_array_equal(loaded.channels[w], record.channels[w])

    def test_fs_argument_wins(self, tmp_path):
        save_record(sine_record(n_samples=600), tmp_path / "S001.csv", include_time=False)
        assert load_record(tmp_path / "S001.csv", self.meta, fs=250.0).fs == 250.0
        assert load_record(tmp_path / "S001.csv", self.meta).fs == 100.0

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "S001.csv"
        path.write_text("t,ppg_660,ppg_730,ppg_850\n0,1,2,3\n")
        with pytest.raises(MalformedInputError, match="malformed signal header"):
            load_record(path, self.meta)

    def test_corpus_orphan_file(self, tmp_path):
        save_record(sine_record("S001", n_samples=600), tmp_path / "S001.csv")
        save_record(sine_record("S999", n_samples=600), tmp_path / "S999.csv")
        with pytest.raises(MissingMetadataError):
            load_corpus(tmp_path, [self.meta])

    def test_corpus_skips_subject_without_file(self, tmp_path):
        save_record(sine_record("S001", n_samples=600), tmp_path / "S001.csv")
        other = SubjectMeta(subject_id="S002", age=22, sex="F", hb_ref=None)
        records = load_corpus(tmp_path, [other, self.meta])
        assert [r.subject_id for r in records] == ["S001"]
        assert records[0].hb_ref == 130

    def test_missing_signals_dir(self, tmp_path):
        with pytest.raises(MissingInputError):
            load_corpus(tmp_path / "signals", [self.meta])


class TestAggregation:
    def setup_method(self):
        self.metas = [
            SubjectMeta(subject_id="A", age=30, sex="M", hb_ref=140.0),
            SubjectMeta(subject_id="B", age=60, sex="F", hb_ref=None),
        ]
        self.table = FeatureTable(
            pd.DataFrame(
                {
                    "subject_id": ["A", "A", "A", "B"],
                    "segment_index": [0, 1, 2, 0],
                    "x": [1.0, 2.0, 9.0, 5.0],
                    "y": [0.5, np.nan, 1.5, 2.0],
                }
            )
        )

    def test_mean_and_median(self):
        vectors = aggregate_subjects(self.table, self.metas)
        row = vectors.frame.set_index("subject_id").loc["A"]
        assert row["x_mean"] == pytest.approx(4.0)
        assert row["x_median"] == pytest.approx(2.0)
        assert row["y_mean"] == pytest.approx(1.0)
        assert row["n_segments"] == 3
        assert row["sex_encoded"] == 1
        assert row["hb_ref"] == 140.0

    def test_column_order(self):
        vectors = aggregate_subjects(self.table, self.metas)
        assert list(vectors.frame.columns) == [
            "subject_id", "x_mean", "x_median", "y_mean", "y_median", "age", "sex_encoded", "n_segments", "hb_ref",
        ]
        assert vectors.feature_names == ["x_mean", "x_median", "y_mean", "y_median", "age", "sex_encoded"]

    def test_segment_order_invariance(self):
        shuffled = FeatureTable(self.table.frame.sample(frac=1.0, random_state=3).reset_index(drop=True))
        pd.testing.assert_frame_equal(
            aggregate_subjects(self.table, self.metas).frame, aggregate_subjects(shuffled, self.metas).frame
        )

    def test_unlabeled_subject_kept(self):
        vectors = aggregate_subjects(self.table, self.metas)
        assert vectors.subject_ids == ["A", "B"]
        assert vectors.labeled().subject_ids == ["A"]

    def test_zero_segment_subject_excluded(self):
        metas = self.metas + [SubjectMeta(subject_id="C", age=44, sex="F", hb_ref=120.0)]
        assert aggregate_subjects(self.table, metas).subject_ids == ["A", "B"]

    def test_subject_without_metadata(self):
        with pytest.raises(MissingMetadataError):
            aggregate_subjects(self.table, self.metas[:1])

    def test_single_operator(self):
        vectors = DatasetService(ops=("median",)).aggregate(self.table, self.metas)
        assert "x_median" in vectors.frame.columns
        assert "x_mean" not in vectors.frame.columns

    def test_matrix_feature_mismatch(self):
        vectors = aggregate_subjects(self.table, self.metas)
        with pytest.raises(FeatureMismatchError):
            vectors.matrix(["x_mean", "z_mean"])

    def test_csv_round_trip(self, tmp_path):
        vectors = aggregate_subjects(self.table, self.metas)
        vectors.to_csv(tmp_path / "subjects.csv")
        loaded = SubjectFeatureTable.from_csv(tmp_path / "subjects.csv")
        np.testing.assert_array_equal(loaded.matrix(vectors.feature_names), vectors.matrix())

    def test_csv_missing_columns(self, tmp_path):
        pd.DataFrame({"subject_id": ["A"], "x_mean": [1.0]}).to_csv(tmp_path / "s.csv", index=False)
        with pytest.raises(MalformedInputError):
            SubjectFeatureTable.from_csv(tmp_path / "s.csv")


class TestSplit:
    def test_sizes(self):
        assert len(split_subjects(subject_table(np.linspace(100, 170, 10))).test) == 2
        split = split_subjects(subject_table(np.linspace(100, 170, 152)))
        assert len(split.test) == 30
        assert len(split.train) == 122

    def test_deterministic(self):
        vectors = subject_table(np.linspace(100, 170, 40))
        assert split_subjects(vectors, seed=7) == split_subjects(vectors, seed=7)

    def test_partition_over_seeds(self):
        vectors = subject_table(np.linspace(100, 170, 37), unlabeled=3)
        labeled = set(vectors.labeled().subject_ids)
        for seed in range(100):
            split = split_subjects(vectors, seed=seed)
            assert not set(split.train) & set(split.test)
            assert set(split.train) | set(split.test) == labeled
            assert len(split.test) == 7

    def test_stratified_by_quartile(self):
        hb = np.linspace(100, 170, 100)
        vectors = subject_table(hb)
        for seed in range(10):
            test = set(split_subjects(vectors, seed=seed).test)
            per_quartile = [len(test & {f"S{i:03d}" for i in range(q * 25, (q + 1) * 25)}) for q in range(4)]
            assert per_quartile == [5, 5, 5, 5]

    def test_too_few_subjects(self):
        with pytest.raises(TooFewSubjectsError, match="too few subjects"):
            split_subjects(subject_table([120.0, 130.0, 140.0, 150.0], unlabeled=5))

    def test_test_size_clamped(self):
        vectors = subject_table(np.linspace(100, 170, 5))
        assert len(split_subjects(vectors, test_fraction=0.05).test) == 1
        assert len(split_subjects(vectors, test_fraction=0.95).train) == 1

    def test_invalid_fraction(self):
        with pytest.raises(ValueError):
            split_subjects(subject_table(np.linspace(100, 170, 10)), test_fraction=1.0)

    def test_assignment_disjoint(self):
        with pytest.raises(ValidationError):
            SplitAssignment(seed=1, train=["a", "b"], test=["b"])

    def test_save_and_load(self, tmp_path):
        split = split_subjects(subject_table(np.linspace(100, 170, 20)), seed=3)
        split.save(tmp_path / "split.json")
        assert SplitAssignment.load(tmp_path / "split.json") == split
        assert json.loads((tmp_path / "split.json").read_text())["seed"] == 3

    def test_load_errors(self, tmp_path):
        with pytest.raises(MissingInputError):
            SplitAssignment.load(tmp_path / "split.json")
        (tmp_path / "split.json").write_text("{not json")
        with pytest.raises(MalformedInputError):
            SplitAssignment.load(tmp_path / "split.json")
