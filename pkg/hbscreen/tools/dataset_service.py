"""Subject metadata, signal/metadata CSV ingestion, subject-level aggregation and
the subject-wise train/test split."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from ..core.config import Config
from ..core.exceptions import (
    FeatureMismatchError,
    MalformedInputError,
    MissingInputError,
    MissingMetadataError,
    TooFewSubjectsError,
)
from .feature_extraction import ID_COLUMNS, FeatureTable
from .signal_processing import WAVELENGTHS, PpgRecord

config = Config.get_instance()
logger = logging.getLogger(__name__)

METADATA_COLUMNS = ("subject_id", "age", "sex", "hb_g_per_l")
SIGNAL_COLUMNS = tuple(f"ppg_{w.nm}" for w in WAVELENGTHS)
HB_SANITY_RANGE = (40.0, 250.0)
MIN_SPLIT_SUBJECTS = 5
SUBJECT_EXTRA_COLUMNS = ("age", "sex_encoded")


class SubjectMeta(BaseModel):
    """Demographics and optional reference Hb (g/L) of one subject."""

    subject_id: str
    age: float = Field(..., gt=0)
    sex: Literal["male", "female"]
    hb_ref: Optional[float] = Field(None, ge=HB_SANITY_RANGE[0], le=HB_SANITY_RANGE[1])

    @field_validator("sex", mode="before")
    @classmethod
    def _normalize_sex(cls, v):
        if isinstance(v, str):
            v = v.strip().lower()
            return {"m": "male", "f": "female"}.get(v, v)
        return v

    @field_validator("hb_ref", mode="before")
    @classmethod
    def _blank_is_missing(cls, v):
        if v is None or (isinstance(v, str) and not v.strip()):
            return None
        if isinstance(v, float) and math.isnan(v):
            return None
        return v

    @property
    def sex_encoded(self) -> int:
        return 1 if self.sex == "male" else 0

    @property
    def labeled(self) -> bool:
        return self.hb_ref is not None


class SplitAssignment(BaseModel):
    """Subject-wise train/test partition of the labeled subjects."""

    seed: int
    train: List[str]
    test: List[str]

    @model_validator(mode="after")
    def _disjoint(self) -> "SplitAssignment":
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise ValueError(f"train and test share subjects: {sorted(overlap)}")
        return self

    def save(self, path: Path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        payload = {"seed": self.seed, "train": sorted(self.train), "test": sorted(self.test)}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "SplitAssignment":
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"split file not found: {path}")
        try:
            return cls.model_validate(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise MalformedInputError(f"split file {path} is not valid JSON: line {e.lineno} column {e.colno}") from e
        except ValidationError as e:
            raise MalformedInputError(f"split file {path} is invalid: {e.errors()[0].get('msg')}") from e


@dataclass
class SubjectFeatureTable:
    """One row per subject: aggregated features, demographics, n_segments and hb_ref."""

    frame: pd.DataFrame

    @property
    def feature_names(self) -> List[str]:
        return [c for c in self.frame.columns if c not in ("subject_id", "n_segments", "hb_ref")]

    @property
    def subject_ids(self) -> List[str]:
        return self.frame["subject_id"].astype(str).tolist()

    def subset(self, subject_ids: Iterable[str]) -> "SubjectFeatureTable":
        wanted = set(subject_ids)
        return SubjectFeatureTable(self.frame[self.frame["subject_id"].isin(wanted)].reset_index(drop=True))

    def matrix(self, feature_names: Optional[Sequence[str]] = None) -> np.ndarray:
        names = list(feature_names) if feature_names is not None else self.feature_names
        missing = [n for n in names if n not in self.frame.columns]
        if missing:
            raise FeatureMismatchError(f"subject table lacks model features: {missing}")
        return self.frame[names].to_numpy(dtype=float)

    def targets(self) -> np.ndarray:
        return self.frame["hb_ref"].to_numpy(dtype=float)

    def labeled(self) -> "SubjectFeatureTable":
        return SubjectFeatureTable(self.frame[self.frame["hb_ref"].notna()].reset_index(drop=True))

    def to_csv(self, path: Path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path: Path) -> "SubjectFeatureTable":
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"subject feature table not found: {path}")
        frame = pd.read_csv(path, dtype={"subject_id": str}, float_precision="round_trip")
        missing = [c for c in ("subject_id", "n_segments", "hb_ref") + SUBJECT_EXTRA_COLUMNS if c not in frame.columns]
        if missing:
            raise MalformedInputError(f"subject feature table {path} lacks columns {missing}")
        return cls(frame=frame)


# Metadata CSV


def load_metadata(path: Path) -> List[SubjectMeta]:
    """Read ``subject_id,age,sex,hb_g_per_l``; unrelated clinical columns are ignored."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"metadata file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise MalformedInputError(f"metadata file {path} is empty") from e
    missing = [c for c in METADATA_COLUMNS if c not in frame.columns]
    if missing:
        raise MalformedInputError(
            f"malformed metadata header in {path}: missing {missing}, expected {','.join(METADATA_COLUMNS)}"
        )
    extra = [c for c in frame.columns if c not in METADATA_COLUMNS]
    if extra:
        logger.info("Ignoring unrelated metadata columns: %s", extra)

    metas: List[SubjectMeta] = []
    seen = set()
    for row_no, row in enumerate(frame.itertuples(index=False), start=2):
        try:
            meta = SubjectMeta(subject_id=row.subject_id.strip(), age=row.age, sex=row.sex, hb_ref=row.hb_g_per_l)
        except ValidationError as e:
            first = e.errors()[0]
            raise MalformedInputError(
                f"metadata {path} line {row_no}: {'.'.join(map(str, first.get('loc', ())))}: {first.get('msg')}"
            ) from e
        if meta.subject_id in seen:
            raise MalformedInputError(f"metadata {path} line {row_no}: duplicate subject_id {meta.subject_id}")
        seen.add(meta.subject_id)
        metas.append(meta)
    return metas


def save_metadata(metas: Iterable[SubjectMeta], path: Path):
    rows = [
        {
            "subject_id": m.subject_id,
            "age": m.age,
            "sex": "M" if m.sex == "male" else "F",
            "hb_g_per_l": "" if m.hb_ref is None else repr(float(m.hb_ref)),
        }
        for m in sorted(metas, key=lambda m: m.subject_id)
    ]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=list(METADATA_COLUMNS)).to_csv(path, index=False)


# Signal CSV


def load_record(path: Path, meta: SubjectMeta, fs: Optional[float] = None) -> PpgRecord:
    """Read ``[t,]ppg_660,ppg_730,ppg_850,ppg_940``; fs falls back to the ``t`` column, then the default."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"signal file not found: {path}")
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError as e:
        raise MalformedInputError(f"signal file {path} is empty") from e
    expected = [c for c in frame.columns if c != "t"]
    if expected != list(SIGNAL_COLUMNS):
        raise MalformedInputError(
            f"malformed signal header in {path}: got {list(frame.columns)}, expected [t,]{','.join(SIGNAL_COLUMNS)}"
        )
    if fs is None:
        if "t" in frame.columns and len(frame) > 1:
            fs = 1.0 / float(np.median(np.diff(frame["t"].to_numpy(dtype=float))))
        else:
            fs = config.default_fs
    try:
        channels = {w: frame[f"ppg_{w.nm}"].to_numpy(dtype=float) for w in WAVELENGTHS}
    except ValueError as e:
        raise MalformedInputError(f"signal file {path} has non-numeric samples") from e
    return PpgRecord(
        subject_id=meta.subject_id,
        fs=fs,
        channels=channels,
        age=meta.age,
        sex=meta.sex,
        hb_ref=meta.hb_ref,
    )


def save_record(record: PpgRecord, path: Path, include_time: bool = True):
    data: Dict[str, np.ndarray] = {}
    if include_time:
        data["t"] = np.arange(record.n_samples) / record.fs
    for w in WAVELENGTHS:
        data[f"ppg_{w.nm}"] = record.channels[w]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(data).to_csv(path, index=False, float_format="%.17g")


def load_corpus(signals_dir: Path, metas: Sequence[SubjectMeta], fs: Optional[float] = None) -> List[PpgRecord]:
    """Records for every subject with a signal file, in subject-id order."""
    signals_dir = Path(signals_dir)
    if not signals_dir.is_dir():
        raise MissingInputError(f"signals directory not found: {signals_dir}")
    meta_by_id = {m.subject_id: m for m in metas}
    files = {p.stem: p for p in sorted(signals_dir.glob("*.csv"))}
    orphans = sorted(set(files) - set(meta_by_id))
    if orphans:
        raise MissingMetadataError(f"signal files without metadata: {orphans}")
    records = []
    for subject_id in sorted(meta_by_id):
        if subject_id not in files:
            logger.warning("Subject %s has metadata but no signal file; excluded", subject_id)
            continue
        records.append(load_record(files[subject_id], meta_by_id[subject_id], fs))
    return records


# Aggregation


def aggregate_subjects(
    table: FeatureTable,
    metas: Sequence[SubjectMeta],
    ops: Sequence[str] = ("mean", "median"),
) -> SubjectFeatureTable:
    """Collapse segment rows to one vector per subject (missing entries excluded from each statistic)."""
    for op in ops:
        if op not in ("mean", "median"):
            raise ValueError(f"unsupported aggregation operator {op!r}")
    meta_by_id = {m.subject_id: m for m in metas}
    frame = table.frame.copy()
    frame["subject_id"] = frame["subject_id"].astype(str)
    table_ids = set(frame["subject_id"])
    unknown = sorted(table_ids - set(meta_by_id))
    if unknown:
        raise MissingMetadataError(f"subjects without metadata: {unknown}")
    for subject_id in sorted(set(meta_by_id) - table_ids):
        logger.warning("Subject %s has zero segments; excluded from aggregation", subject_id)

    features = table.columns
    # fixed row order keeps the floating-point sums independent of input order
    frame = frame.sort_values(list(ID_COLUMNS), kind="mergesort")
    grouped = frame.groupby("subject_id", sort=True)
    stats = {op: getattr(grouped[features], op)() for op in ops}
    counts = grouped.size()

    rows = []
    for subject_id in counts.index:
        meta = meta_by_id[subject_id]
        row: Dict[str, object] = {"subject_id": subject_id}
        for name in features:
            for op in ops:
                row[f"{name}_{op}"] = float(stats[op].at[subject_id, name])
        row["age"] = float(meta.age)
        row["sex_encoded"] = meta.sex_encoded
        row["n_segments"] = int(counts.at[subject_id])
        row["hb_ref"] = meta.hb_ref if meta.hb_ref is not None else np.nan
        rows.append(row)

    columns = ["subject_id"] + [f"{n}_{op}" for n in features for op in ops] + list(SUBJECT_EXTRA_COLUMNS)
    columns += ["n_segments", "hb_ref"]
    logger.info("Aggregated %d segments into %d subject vectors", len(frame), len(rows))
    return SubjectFeatureTable(frame=pd.DataFrame(rows, columns=columns))


# Split


def _largest_remainder(total: int, sizes: Sequence[int]) -> List[int]:
    n = sum(sizes)
    exact = [total * s / n for s in sizes]
    quotas = [int(math.floor(e)) for e in exact]
    # ties go to the lower quartile index
    order = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - quotas[i]), i))
    for i in order[: total - sum(quotas)]:
        quotas[i] += 1
    return quotas


def split_subjects(vectors: SubjectFeatureTable, test_fraction: float = 0.2, seed: int = 42) -> SplitAssignment:
    """Hb-quartile-stratified subject-wise split of the labeled subjects."""
    if not (0.0 < test_fraction < 1.0):
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    labeled = vectors.labeled().frame
    n = len(labeled)
    if n < MIN_SPLIT_SUBJECTS:
        raise TooFewSubjectsError(f"too few subjects: {n} labeled, need at least {MIN_SPLIT_SUBJECTS}")

    n_test = int(math.floor(test_fraction * n + 0.5))
    clamped = min(max(n_test, 1), n - 1)
    if clamped != n_test:
        logger.warning("Test size %d clamped to %d for %d subjects", n_test, clamped, n)
        n_test = clamped

    ordered = sorted(zip(labeled["hb_ref"].astype(float), labeled["subject_id"].astype(str)))
    quartiles = [list(q) for q in np.array_split(np.array([sid for _, sid in ordered], dtype=object), 4)]
    quotas = _largest_remainder(n_test, [len(q) for q in quartiles])

    rng = np.random.default_rng(seed)
    test: List[str] = []
    for ids, quota in zip(quartiles, quotas):
        ids = sorted(ids)
        picked = rng.permutation(len(ids))[:quota]
        test.extend(ids[i] for i in picked)
    test_set = set(test)
    train = sorted(sid for _, sid in ordered if sid not in test_set)
    logger.info("Split %d labeled subjects: %d train / %d test (seed %d)", n, len(train), len(test), seed)
    return SplitAssignment(seed=seed, train=train, test=sorted(test))


class DatasetService:
    """Corpus ingestion and subject-level preparation for one pipeline run."""

    def __init__(self, ops: Sequence[str] = ("mean", "median")):
        self.ops = tuple(ops)

    def load(self, signals_dir: Path, metadata_path: Path, fs: Optional[float] = None) -> Tuple[List[SubjectMeta], List[PpgRecord]]:
        metas = load_metadata(metadata_path)
        return metas, load_corpus(signals_dir, metas, fs)

    def aggregate(self, table: FeatureTable, metas: Sequence[SubjectMeta]) -> SubjectFeatureTable:
        return aggregate_subjects(table, metas, self.ops)


dataset_service = DatasetService()
