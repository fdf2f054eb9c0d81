"""Per-segment multichannel PPG features and the segment-level feature table.

Column layout of a FeatureTable (after the ``subject_id``/``segment_index`` ids):

1. per-wavelength blocks in ascending nm, each ``<feature>_<nm>`` for
   PER_WAVELENGTH_FEATURES;
2. cross-wavelength ratios ``<group>_ratio_<nm_i>_<nm_j>`` for every pair
   nm_i < nm_j in lexicographic order, groups in RATIO_GROUPS order;
3. quality columns ``sqi_<nm>``, ``snr_db_<nm>`` in ascending nm.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from ..core.exceptions import CorruptSegmentError, DegenerateFeatureTableError, MalformedInputError
from .signal_processing import (
    PHYSIOLOGICAL_BAND,
    SNR_SENTINEL_DB,
    WAVELENGTHS,
    PulseLandmarks,
    Segment,
    SignalProcessingService,
    Wavelength,
    band_powers,
    detect_peaks_troughs,
    filter_segment,
    signal_service,
    welch_psd,
)

logger = logging.getLogger(__name__)

TIME_FEATURES = ("mean", "std", "rms", "ptp", "variance", "energy")
OPTICAL_FEATURES = ("ac", "dc", "ac_dc", "log_attenuation")
SPECTRAL_FEATURES = ("dom_freq", "band_power", "spec_entropy")
PER_WAVELENGTH_FEATURES = TIME_FEATURES + OPTICAL_FEATURES + SPECTRAL_FEATURES
RATIO_GROUPS = ("mean", "ac_dc", "attenuation")
QUALITY_FEATURES = ("sqi", "snr_db")
ID_COLUMNS = ("subject_id", "segment_index")
DEMOGRAPHIC_FEATURES = ("age", "sex_encoded")

_DENOMINATOR_EPS = 1e-12

MISSING = float("nan")


def wavelength_pairs() -> List[Tuple[Wavelength, Wavelength]]:
    """All pairs nm_i < nm_j in lexicographic order."""
    return list(itertools.combinations(WAVELENGTHS, 2))


def ratio_column(group: str, first: Wavelength, second: Wavelength) -> str:
    return f"{group}_ratio_{first.nm}_{second.nm}"


def feature_columns() -> List[str]:
    """Deterministic feature column order (ids excluded)."""
    columns = [f"{name}_{w.nm}" for w in WAVELENGTHS for name in PER_WAVELENGTH_FEATURES]
    columns += [ratio_column(group, a, b) for a, b in wavelength_pairs() for group in RATIO_GROUPS]
    columns += [f"{name}_{w.nm}" for w in WAVELENGTHS for name in QUALITY_FEATURES]
    return columns


def _strip_aggregate(name: str) -> str:
    for suffix in ("_mean", "_median"):
        # "mean_660" is a feature, "mean_660_mean" its subject aggregate
        if name.endswith(suffix) and name[: -len(suffix)].rsplit("_", 1)[-1].isdigit():
            return name[: -len(suffix)]
    return name


def feature_category(name: str) -> str:
    """Feature family of a segment or subject-level column."""
    name = _strip_aggregate(name)
    if name in ID_COLUMNS:
        return "id"
    if name in DEMOGRAPHIC_FEATURES:
        return "demographic"
    if "_ratio_" in name:
        return "cross_wavelength"
    base = name.rsplit("_", 1)[0]
    if base in QUALITY_FEATURES:
        return "quality"
    if base in TIME_FEATURES:
        return "time"
    if base in OPTICAL_FEATURES:
        return "optical"
    if base in SPECTRAL_FEATURES:
        return "spectral"
    return "other"


def feature_wavelength(name: str) -> str:
    """'660' .. '940' for single-channel columns, 'cross' for ratios, else the category."""
    category = feature_category(name)
    if category == "cross_wavelength":
        return "cross"
    if category in ("demographic", "id", "other"):
        return category
    return _strip_aggregate(name).rsplit("_", 1)[-1]


def _finite_array(x: Sequence[float], subject_id: str, segment_index: int) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        raise CorruptSegmentError(f"corrupt segment: subject {subject_id} segment {segment_index} has non-finite samples")
    return arr


def time_domain_features(x: Sequence[float], subject_id: str = "?", segment_index: int = -1) -> Dict[str, float]:
    """Mean, population std, RMS, peak-to-peak, variance and energy."""
    arr = _finite_array(x, subject_id, segment_index)
    n = arr.size
    mean = float(np.sum(arr) / n)
    std = float(np.std(arr))
    energy = float(np.sum(arr * arr))
    return {
        "mean": mean,
        "std": std,
        "rms": math.sqrt(energy / n),
        "ptp": float(np.max(arr) - np.min(arr)),
        "variance": std * std,
        "energy": energy,
    }


def optical_features(
    raw: Sequence[float],
    filtered: Sequence[float],
    fs: float,
    landmarks: Optional[PulseLandmarks] = None,
) -> Dict[str, float]:
    """AC from the filtered pulse landmarks, DC from the raw baseline."""
    filtered = np.asarray(filtered, dtype=float)
    landmarks = landmarks if landmarks is not None else detect_peaks_troughs(filtered, fs)
    if not landmarks.sufficient:
        return {name: MISSING for name in OPTICAL_FEATURES}
    ac = float(np.mean(filtered[landmarks.peaks]) - np.mean(filtered[landmarks.troughs]))
    dc = float(np.mean(np.asarray(raw, dtype=float)))
    ac_dc = ac / dc if abs(dc) > _DENOMINATOR_EPS else MISSING
    log_attenuation = math.log(dc / ac) if dc > 0 and ac > 0 else MISSING
    return {"ac": ac, "dc": dc, "ac_dc": ac_dc, "log_attenuation": log_attenuation}


def spectral_features(
    filtered: Sequence[float],
    fs: float,
    band: Tuple[float, float] = PHYSIOLOGICAL_BAND,
    nperseg: int = 250,
    overlap_fraction: float = 0.5,
    window_kind: str = "hann",
) -> Dict[str, float]:
    """Dominant in-band frequency, normalized band power and normalized spectral entropy."""
    psd = welch_psd(filtered, fs, nperseg=nperseg, overlap_fraction=overlap_fraction, window_kind=window_kind)
    total = float(np.sum(psd.power))
    if total <= 0.0 or not np.isfinite(total):
        return {name: MISSING for name in SPECTRAL_FEATURES}
    mask = psd.band_mask(band)
    dom_freq = float(psd.freqs[mask][np.argmax(psd.power[mask])]) if np.any(mask) else MISSING
    p_band, p_out = band_powers(psd, band)
    band_power = p_band / (p_band + p_out)
    p = psd.power / total
    nz = p[p > 0]
    n_bins = len(p)
    entropy = float(-np.sum(nz * np.log(nz)) / math.log(n_bins)) if n_bins > 1 else MISSING
    return {
        "dom_freq": dom_freq,
        "band_power": min(max(band_power, 0.0), 1.0),
        "spec_entropy": min(max(entropy, 0.0), 1.0) if not math.isnan(entropy) else MISSING,
    }


def _ratio(num: float, den: float) -> float:
    if math.isnan(num) or math.isnan(den) or abs(den) < _DENOMINATOR_EPS:
        return MISSING
    return num / den


def pair_ratio(first: Mapping[str, float], second: Mapping[str, float], group: str) -> float:
    """One cross-wavelength ratio for an ordered channel pair (absence propagates)."""
    if group == "mean":
        return _ratio(first["mean"], second["mean"])
    if group == "ac_dc":
        return _ratio(first["ac_dc"], second["ac_dc"])
    if group == "attenuation":
        q = _ratio(first["dc"], second["dc"])
        return math.log(q) if not math.isnan(q) and q > 0 else MISSING
    raise ValueError(f"unknown ratio group {group!r}")


def cross_wavelength_features(per_wavelength: Mapping[Wavelength, Mapping[str, float]]) -> Dict[str, float]:
    return {
        ratio_column(group, a, b): pair_ratio(per_wavelength[a], per_wavelength[b], group)
        for a, b in wavelength_pairs()
        for group in RATIO_GROUPS
    }


@dataclass
class SegmentFeatureRow:
    subject_id: str
    segment_index: int
    values: Dict[str, float] = field(default_factory=dict)

    def as_record(self) -> Dict[str, object]:
        return {"subject_id": self.subject_id, "segment_index": self.segment_index, **self.values}


@dataclass
class FeatureTable:
    """Rectangular segment-level feature table (ids + feature columns)."""

    frame: pd.DataFrame

    @property
    def columns(self) -> List[str]:
        return [c for c in self.frame.columns if c not in ID_COLUMNS]

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    def missing_fraction(self) -> Dict[str, float]:
        if self.frame.empty:
            return {c: 0.0 for c in self.columns}
        return {c: float(self.frame[c].isna().mean()) for c in self.columns}

    def subject_ids(self) -> List[str]:
        return sorted(self.frame["subject_id"].astype(str).unique().tolist())

    def to_csv(self, path: Path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path: Path) -> "FeatureTable":
        frame = pd.read_csv(path, dtype={"subject_id": str}, float_precision="round_trip")
        missing = [c for c in ID_COLUMNS if c not in frame.columns]
        if missing:
            raise MalformedInputError(f"feature table {path} lacks id columns {missing}")
        return cls(frame=frame)


class DroppedColumn(BaseModel):
    name: str
    reason: str  # "nan-heavy" | "constant"
    missing_fraction: float
    variance: Optional[float] = None


class DroppedColumnReport(BaseModel):
    nan_frac_max: float
    var_min: float
    dropped: List[DroppedColumn] = []
    retained: List[str] = []

    def to_json(self, path: Path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.model_dump(), indent=2, sort_keys=True), encoding="utf-8")


def extract_segment_row(
    segments: Mapping[Wavelength, Segment],
    service: Optional[SignalProcessingService] = None,
) -> SegmentFeatureRow:
    """Full feature vector of one aligned segment across the four channels."""
    service = service or signal_service
    s = service.settings
    first = segments[WAVELENGTHS[0]]
    values: Dict[str, float] = {}
    per_wavelength: Dict[Wavelength, Dict[str, float]] = {}
    quality: Dict[str, float] = {}
    for wavelength in WAVELENGTHS:
        seg = segments[wavelength]
        filtered = seg.filtered
        if filtered is None:
            filtered = filter_segment(seg, service.bandpass_for(seg.fs)).filtered
        feats = time_domain_features(seg.raw, seg.subject_id, seg.index)
        landmarks = service.landmarks(filtered, seg.fs)
        if not landmarks.sufficient:
            logger.debug("subject %s segment %d @%dnm: insufficient pulses", seg.subject_id, seg.index, wavelength.nm)
        feats.update(optical_features(seg.raw, filtered, seg.fs, landmarks))
        feats.update(
            spectral_features(
                filtered,
                seg.fs,
                band=service.band,
                nperseg=s.welch_nperseg,
                overlap_fraction=s.welch_overlap,
                window_kind=s.welch_window,
            )
        )
        per_wavelength[wavelength] = feats
        for name in PER_WAVELENGTH_FEATURES:
            values[f"{name}_{wavelength.nm}"] = feats[name]
        q = service.quality(filtered, seg.fs)
        snr = q.snr_db
        if math.isinf(snr):
            snr = math.copysign(SNR_SENTINEL_DB, snr)
        quality[f"sqi_{wavelength.nm}"] = q.sqi
        quality[f"snr_db_{wavelength.nm}"] = snr
    values.update(cross_wavelength_features(per_wavelength))
    for w in WAVELENGTHS:
        for name in QUALITY_FEATURES:
            values[f"{name}_{w.nm}"] = quality[f"{name}_{w.nm}"]
    return SegmentFeatureRow(subject_id=first.subject_id, segment_index=first.index, values=values)


def build_feature_table(
    subjects: Iterable[Mapping[Wavelength, Sequence[Segment]]],
    service: Optional[SignalProcessingService] = None,
) -> FeatureTable:
    """One row per (subject, segment), sorted by (subject_id, segment_index)."""
    rows: List[Dict[str, object]] = []
    for segments_by_wavelength in subjects:
        n_segments = {len(segs) for segs in segments_by_wavelength.values()}
        if len(n_segments) != 1:
            raise ValueError(f"segments not aligned across wavelengths: counts {sorted(n_segments)}")
        for k in range(n_segments.pop()):
            aligned = {w: segments_by_wavelength[w][k] for w in WAVELENGTHS}
            rows.append(extract_segment_row(aligned, service).as_record())
    columns = list(ID_COLUMNS) + feature_columns()
    frame = pd.DataFrame(rows, columns=columns)
    if not frame.empty:
        frame["subject_id"] = frame["subject_id"].astype(str)
        frame = frame.sort_values(list(ID_COLUMNS), kind="mergesort").reset_index(drop=True)
    logger.info("Built feature table: %d rows x %d feature columns", len(frame), len(columns) - len(ID_COLUMNS))
    return FeatureTable(frame=frame)


def clean_feature_table(
    table: FeatureTable,
    nan_frac_max: float = 0.2,
    var_min: float = 1e-12,
) -> Tuple[FeatureTable, DroppedColumnReport]:
    """Drop NaN-heavy and constant columns, then impute remaining gaps with the column median.

    A column counts as constant when either its observed entries or its imputed values have
    variance below ``var_min``, so cleaning an already cleaned table is a no-op.
    """
    frame = table.frame.copy()
    missing = table.missing_fraction()
    dropped: List[DroppedColumn] = []
    keep: List[str] = []
    for column in table.columns:
        frac = missing[column]
        if frac > nan_frac_max:
            dropped.append(DroppedColumn(name=column, reason="nan-heavy", missing_fraction=frac))
            continue
        observed = frame[column].dropna().to_numpy(dtype=float)
        variance = 0.0
        if observed.size:
            frame[column] = frame[column].fillna(float(np.median(observed)))
            variance = min(float(np.var(observed)), float(np.var(frame[column].to_numpy(dtype=float))))
        if variance < var_min:
            dropped.append(DroppedColumn(name=column, reason="constant", missing_fraction=frac, variance=variance))
            continue
        keep.append(column)
    if not keep:
        raise DegenerateFeatureTableError(
            f"degenerate feature table: all {len(table.columns)} feature columns dropped during cleaning"
        )
    cleaned = frame[list(ID_COLUMNS) + keep].copy()
    for item in dropped:
        logger.info("Dropped column %s (%s)", item.name, item.reason)
    report = DroppedColumnReport(nan_frac_max=nan_frac_max, var_min=var_min, dropped=dropped, retained=keep)
    return FeatureTable(frame=cleaned), report


class FeatureExtractionService:
    """Feature-table construction for whole records under one signal configuration."""

    def __init__(self, signal: Optional[SignalProcessingService] = None):
        self.signal = signal or signal_service

    def table_for_records(self, records) -> FeatureTable:
        return build_feature_table((self.signal.process_record(r) for r in records), self.signal)


feature_service = FeatureExtractionService()
