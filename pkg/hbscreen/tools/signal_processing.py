"""Raw multichannel PPG handling: segmentation, bandpass filtering, Welch PSD,
quality indices and pulse landmark detection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import signal as sp_signal

from ..core.config import SignalSettings
from ..core.exceptions import (
    InvalidBandError,
    InvalidRecordError,
    PsdSegmentTooShortError,
    RecordTooShortError,
)

logger = logging.getLogger(__name__)

PHYSIOLOGICAL_BAND = (0.5, 5.0)
SNR_SENTINEL_DB = 999.0  # stands in for +inf when no out-of-band power exists
MIN_SAMPLING_RATE = 10.0


class Wavelength(IntEnum):
    """The four admissible optical channels, ordered by nanometers."""

    NM_660 = 660
    NM_730 = 730
    NM_850 = 850
    NM_940 = 940

    @property
    def nm(self) -> int:
        return int(self.value)

    @classmethod
    def from_nm(cls, nm: int) -> "Wavelength":
        try:
            return cls(int(nm))
        except ValueError:
            raise ValueError(f"unsupported wavelength {nm} nm; expected one of {[w.nm for w in cls]}") from None


WAVELENGTHS: Tuple[Wavelength, ...] = tuple(sorted(Wavelength))


@dataclass
class PpgRecord:
    """One subject's four-channel raw PPG plus sampling rate and demographics."""

    subject_id: str
    fs: float
    channels: Dict[Wavelength, np.ndarray]
    age: float
    sex: str  # "male" | "female"
    hb_ref: Optional[float] = None

    def __post_init__(self):
        if not (self.fs > MIN_SAMPLING_RATE):
            raise InvalidRecordError(f"subject {self.subject_id}: fs={self.fs} Hz must exceed {MIN_SAMPLING_RATE} Hz")
        missing = [w.nm for w in WAVELENGTHS if w not in self.channels]
        if missing:
            raise InvalidRecordError(f"subject {self.subject_id}: missing channels {missing}")
        self.channels = {Wavelength(w): np.asarray(x, dtype=float) for w, x in self.channels.items()}
        lengths = {w.nm: len(x) for w, x in self.channels.items()}
        if len(set(lengths.values())) != 1:
            raise InvalidRecordError(f"subject {self.subject_id}: unequal channel lengths {lengths}")

    @property
    def n_samples(self) -> int:
        return len(self.channels[Wavelength.NM_660])


@dataclass
class Segment:
    """Fixed-length window of one channel."""

    subject_id: str
    index: int
    wavelength: Wavelength
    raw: np.ndarray
    fs: float
    filtered: Optional[np.ndarray] = None
    start: int = 0


@dataclass
class PsdEstimate:
    freqs: np.ndarray
    power: np.ndarray

    @property
    def bin_width(self) -> float:
        return float(self.freqs[1] - self.freqs[0]) if len(self.freqs) > 1 else 0.0

    def band_mask(self, band: Tuple[float, float] = PHYSIOLOGICAL_BAND) -> np.ndarray:
        return (self.freqs >= band[0]) & (self.freqs <= band[1])


class QualityIndices(BaseModel):
    """Spectral signal quality of one segment."""

    snr_db: float
    sqi: float = Field(..., ge=0.0, le=1.0)

    @property
    def snr_saturated(self) -> bool:
        return math.isinf(self.snr_db) and self.snr_db > 0

    def to_record(self) -> Dict[str, object]:
        """Serializable form with the +inf SNR replaced by the sentinel."""
        snr = math.copysign(SNR_SENTINEL_DB, self.snr_db) if math.isinf(self.snr_db) else self.snr_db
        return {"snr_db": snr, "sqi": self.sqi, "snr_saturated": self.snr_saturated}


@dataclass
class BandpassFilter:
    """Butterworth bandpass as cascaded second-order sections."""

    sos: np.ndarray
    fs: float
    low: float
    high: float
    order: int
    impulse_len: int = 1

    @property
    def padlen(self) -> int:
        return 3 * self.impulse_len


@dataclass
class PulseLandmarks:
    peaks: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    troughs: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))

    @property
    def sufficient(self) -> bool:
        """False flags "insufficient pulses" (fewer than two systolic peaks)."""
        return len(self.peaks) >= 2


def segment_record(record: PpgRecord, window_len: int = 500) -> Dict[Wavelength, List[Segment]]:
    """Split every channel into aligned, non-overlapping windows; the trailing partial window is dropped."""
    if window_len < 2:
        raise ValueError(f"window_len must be >= 2, got {window_len}")
    n = record.n_samples
    if n < window_len:
        raise RecordTooShortError(
            f"record too short: subject {record.subject_id} has {n} samples, need at least {window_len}"
        )
    n_segments = n // window_len
    segments: Dict[Wavelength, List[Segment]] = {}
    for wavelength in WAVELENGTHS:
        x = record.channels[wavelength]
        segments[wavelength] = [
            Segment(
                subject_id=record.subject_id,
                index=k,
                wavelength=wavelength,
                raw=x[k * window_len : (k + 1) * window_len].copy(),
                fs=record.fs,
                start=k * window_len,
            )
            for k in range(n_segments)
        ]
    if n % window_len:
        logger.debug("subject %s: dropped %d trailing samples", record.subject_id, n % window_len)
    return segments


def _effective_impulse_len(sos: np.ndarray, fs: float, low: float, energy: float = 0.99) -> int:
    """Samples until the impulse response holds ``energy`` of its total energy."""
    n_impulse = int(math.ceil(20.0 * fs / low))
    impulse = np.zeros(n_impulse)
    impulse[0] = 1.0
    h = sp_signal.sosfilt(sos, impulse)
    cum = np.cumsum(h * h)
    if cum[-1] <= 0:
        return 1
    return int(np.searchsorted(cum / cum[-1], energy) + 1)


def design_bandpass(fs: float, low: float = 0.5, high: float = 5.0, order: int = 3) -> BandpassFilter:
    """Digital Butterworth bandpass via the pre-warped bilinear transform."""
    if not (0.0 < low < high < fs / 2.0):
        raise InvalidBandError(f"invalid band [{low}, {high}] Hz for fs={fs} Hz: need 0 < low < high < fs/2")
    if order < 1:
        raise InvalidBandError(f"filter order must be >= 1, got {order}")
    sos = sp_signal.butter(order, [low, high], btype="bandpass", fs=fs, output="sos")
    return BandpassFilter(
        sos=sos,
        fs=fs,
        low=low,
        high=high,
        order=order,
        impulse_len=_effective_impulse_len(sos, fs, low),
    )


def apply_bandpass(x: np.ndarray, coeffs: BandpassFilter) -> np.ndarray:
    """Zero-phase forward-backward filtering with odd-reflection edge padding."""
    x = np.asarray(x, dtype=float)
    padlen = min(coeffs.padlen, len(x) - 1)
    return sp_signal.sosfiltfilt(coeffs.sos, x, padtype="odd", padlen=padlen)


def filter_segment(segment: Segment, coeffs: BandpassFilter) -> Segment:
    if not math.isclose(segment.fs, coeffs.fs):
        raise ValueError(f"filter designed for fs={coeffs.fs} Hz applied to segment with fs={segment.fs} Hz")
    return replace(segment, filtered=apply_bandpass(segment.raw, coeffs))


def welch_psd(
    samples: Sequence[float],
    fs: float,
    nperseg: int = 250,
    overlap_fraction: float = 0.5,
    window_kind: str = "hann",
) -> PsdEstimate:
    """Welch PSD: averaged windowed periodograms, density scaling (power x bin width sums to variance)."""
    x = np.asarray(samples, dtype=float)
    if nperseg > len(x):
        raise PsdSegmentTooShortError(f"segment too short for PSD: nperseg={nperseg} > {len(x)} samples")
    if not (0.0 <= overlap_fraction < 1.0):
        raise ValueError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    freqs, power = sp_signal.welch(
        x,
        fs=fs,
        window=window_kind,
        nperseg=nperseg,
        noverlap=int(overlap_fraction * nperseg),
        detrend="constant",
        scaling="density",
        average="mean",
    )
    return PsdEstimate(freqs=freqs, power=np.clip(power, 0.0, None))


def band_powers(psd: PsdEstimate, band: Tuple[float, float] = PHYSIOLOGICAL_BAND) -> Tuple[float, float]:
    """Integrated (in-band, out-of-band) power; bins whose centers lie in ``band`` count as in-band."""
    mask = psd.band_mask(band)
    df = psd.bin_width
    return float(np.sum(psd.power[mask]) * df), float(np.sum(psd.power[~mask]) * df)


def quality_indices(
    samples: Sequence[float],
    fs: float,
    band: Tuple[float, float] = PHYSIOLOGICAL_BAND,
    nperseg: int = 250,
    overlap_fraction: float = 0.5,
    window_kind: str = "hann",
) -> QualityIndices:
    psd = welch_psd(samples, fs, nperseg=nperseg, overlap_fraction=overlap_fraction, window_kind=window_kind)
    p_band, p_out = band_powers(psd, band)
    total = p_band + p_out
    sqi = p_band / total if total > 0 else 0.0
    if p_out > 0 and p_band > 0:
        snr_db = 10.0 * math.log10(p_band / p_out)
    elif p_out > 0:
        snr_db = -math.inf
    elif p_band > 0:
        snr_db = math.inf
    else:
        snr_db = math.nan
    return QualityIndices(snr_db=snr_db, sqi=min(max(sqi, 0.0), 1.0))


def detect_peaks_troughs(
    filtered: Sequence[float],
    fs: float,
    max_rate_hz: float = 3.0,
    prominence_factor: float = 0.25,
) -> PulseLandmarks:
    """Systolic peaks (min spacing fs/max_rate, prominence >= factor * std) and one
    diastolic trough (global minimum) between each consecutive pair of peaks."""
    x = np.asarray(filtered, dtype=float)
    sd = float(np.std(x))
    if sd == 0.0 or not np.isfinite(sd):
        return PulseLandmarks()
    distance = max(1, int(fs / max_rate_hz))
    peaks, _ = sp_signal.find_peaks(x, distance=distance, prominence=prominence_factor * sd)
    if len(peaks) < 2:
        return PulseLandmarks(peaks=peaks.astype(int))
    troughs = np.array([p + int(np.argmin(x[p:q])) for p, q in zip(peaks[:-1], peaks[1:])], dtype=int)
    return PulseLandmarks(peaks=peaks.astype(int), troughs=troughs)


class SignalProcessingService:
    """Applies the signal settings of a pipeline run to whole records."""

    def __init__(self, settings: Optional[SignalSettings] = None):
        self.settings = settings or SignalSettings()
        self._filters: Dict[float, BandpassFilter] = {}

    def bandpass_for(self, fs: float) -> BandpassFilter:
        if fs not in self._filters:
            s = self.settings
            self._filters[fs] = design_bandpass(fs, s.band_low, s.band_high, s.filter_order)
        return self._filters[fs]

    @property
    def band(self) -> Tuple[float, float]:
        return (self.settings.band_low, self.settings.band_high)

    def quality(self, samples: Sequence[float], fs: float) -> QualityIndices:
        s = self.settings
        return quality_indices(
            samples, fs, band=self.band, nperseg=s.welch_nperseg, overlap_fraction=s.welch_overlap, window_kind=s.welch_window
        )

    def landmarks(self, filtered: Sequence[float], fs: float) -> PulseLandmarks:
        return detect_peaks_troughs(
            filtered, fs, max_rate_hz=self.settings.peak_max_rate_hz, prominence_factor=self.settings.peak_prominence_factor
        )

    def process_record(self, record: PpgRecord) -> Dict[Wavelength, List[Segment]]:
        """Segment and filter every channel of a record."""
        coeffs = self.bandpass_for(record.fs)
        segments = segment_record(record, self.settings.window_len)
        return {w: [filter_segment(seg, coeffs) for seg in segs] for w, segs in segments.items()}

    def quality_report(self, record: PpgRecord) -> pd.DataFrame:
        """SNR/SQI per segment and wavelength, before and after filtering."""
        rows = []
        for wavelength, segs in self.process_record(record).items():
            for seg in segs:
                raw_q = self.quality(seg.raw, seg.fs)
                filt_q = self.quality(seg.filtered, seg.fs)
                rows.append(
                    {
                        "subject_id": seg.subject_id,
                        "segment_index": seg.index,
                        "wavelength": wavelength.nm,
                        "snr_db_raw": raw_q.to_record()["snr_db"],
                        "sqi_raw": raw_q.sqi,
                        "snr_db_filtered": filt_q.to_record()["snr_db"],
                        "sqi_filtered": filt_q.sqi,
                        "snr_saturated": raw_q.snr_saturated or filt_q.snr_saturated,
                    }
                )
        return pd.DataFrame(rows, columns=QUALITY_COLUMNS)


QUALITY_COLUMNS = [
    "subject_id",
    "segment_index",
    "wavelength",
    "snr_db_raw",
    "sqi_raw",
    "snr_db_filtered",
    "sqi_filtered",
    "snr_saturated",
]


def summarize_quality(report: pd.DataFrame) -> Dict[str, Dict[str, float]]:
    """Per-wavelength mean SNR/SQI before and after filtering, and the share of segments whose SQI improved."""
    summary: Dict[str, Dict[str, float]] = {}
    sentinels = [SNR_SENTINEL_DB, -SNR_SENTINEL_DB]
    for nm, group in report.groupby("wavelength", sort=True):
        finite_raw = group["snr_db_raw"].replace(sentinels, np.nan)
        finite_filt = group["snr_db_filtered"].replace(sentinels, np.nan)
        summary[str(int(nm))] = {
            "n_segments": int(len(group)),
            "snr_db_raw_mean": float(finite_raw.mean()),
            "snr_db_filtered_mean": float(finite_filt.mean()),
            "sqi_raw_mean": float(group["sqi_raw"].mean()),
            "sqi_filtered_mean": float(group["sqi_filtered"].mean()),
            "sqi_improved_fraction": float((group["sqi_filtered"] >= group["sqi_raw"]).mean()),
        }
    return summary


# Create service instance
signal_service = SignalProcessingService()
