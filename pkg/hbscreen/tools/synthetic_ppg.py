"""Synthetic four-wavelength PPG with known Hb, built on a Beer-Lambert intensity model.

For each channel::

    I(t) = I0 * exp(-w * Hb * (d0 + dd * pulse(t))) + drift(t) + noise(t)
    pulse(t) = sin(2*pi*HR*t) + 0.3 * sin(4*pi*HR*t)

``noise_sd`` is relative to the channel's pulse amplitude and ``drift_amplitude``
relative to its DC level; drift is a 0.1 Hz sinusoid.

The extinction weights are synthetic constants (660 nm most Hb-sensitive), not
physiological values.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .dataset_service import HB_SANITY_RANGE, SubjectMeta, save_metadata, save_record
from .signal_processing import MIN_SAMPLING_RATE, WAVELENGTHS, PpgRecord, Wavelength

logger = logging.getLogger(__name__)

SYNTHETIC_EXTINCTION = {660: 0.010, 730: 0.007, 850: 0.004, 940: 0.005}
HEART_RATE_LIMITS = (0.5, 3.0)
DRIFT_FREQUENCY_HZ = 0.1
SECOND_HARMONIC_WEIGHT = 0.3


class SynthConfig(BaseModel):
    n_subjects: int = Field(100, ge=1)
    fs: float = Field(100.0, gt=MIN_SAMPLING_RATE)
    duration_s: float = Field(30.0, gt=0.0)
    hb_range: Tuple[float, float] = (100.0, 170.0)
    heart_rate_range: Tuple[float, float] = (0.9, 1.6)
    age_range: Tuple[float, float] = (18.0, 80.0)
    extinction_weights: Dict[int, float] = Field(default_factory=lambda: dict(SYNTHETIC_EXTINCTION))
    noise_sd: float = Field(0.0, ge=0.0)
    drift_amplitude: float = Field(0.0, ge=0.0)
    i0: float = Field(1000.0, gt=0.0)
    d0: float = Field(1.0, gt=0.0)
    delta_d: float = Field(0.02, gt=0.0)
    seed: int = 42

    @model_validator(mode="after")
    def _check_ranges(self) -> "SynthConfig":
        lo, hi = self.hb_range
        if not (HB_SANITY_RANGE[0] <= lo <= hi <= HB_SANITY_RANGE[1]):
            raise ValueError(f"hb_range {self.hb_range} must lie within {HB_SANITY_RANGE} g/L")
        lo, hi = self.heart_rate_range
        if not (HEART_RATE_LIMITS[0] <= lo <= hi <= HEART_RATE_LIMITS[1]):
            raise ValueError(f"heart_rate_range {self.heart_rate_range} must lie within {HEART_RATE_LIMITS} Hz")
        if self.age_range[0] <= 0 or self.age_range[0] > self.age_range[1]:
            raise ValueError(f"age_range {self.age_range} must be positive and ordered")
        if set(self.extinction_weights) != {w.nm for w in WAVELENGTHS}:
            raise ValueError(f"extinction_weights must cover exactly {[w.nm for w in WAVELENGTHS]} nm")
        if any(v < 0 for v in self.extinction_weights.values()):
            raise ValueError("extinction weights must be nonnegative")
        return self

    @property
    def n_samples(self) -> int:
        return int(round(self.fs * self.duration_s))


def pulse_waveform(t: np.ndarray, heart_rate_hz: float, phase: float = 0.0) -> np.ndarray:
    arg = 2.0 * math.pi * heart_rate_hz * t + phase
    return np.sin(arg) + SECOND_HARMONIC_WEIGHT * np.sin(2.0 * arg)


def clean_intensity(
    t: np.ndarray, hb: float, heart_rate_hz: float, weight: float, config: SynthConfig, phase: float = 0.0
) -> np.ndarray:
    """Noise- and drift-free channel intensity."""
    return config.i0 * np.exp(-weight * hb * (config.d0 + config.delta_d * pulse_waveform(t, heart_rate_hz, phase)))


def channel_levels(hb: float, weight: float, config: SynthConfig) -> Tuple[float, float]:
    """(DC level, first-order pulse amplitude) used to scale drift and noise."""
    dc = config.i0 * math.exp(-weight * hb * config.d0)
    return dc, dc * weight * hb * config.delta_d


def _subject_id(i: int, n: int) -> str:
    return f"S{i + 1:0{max(3, len(str(n)))}d}"


def generate(config: SynthConfig) -> List[PpgRecord]:
    """Deterministic corpus; each subject draws from its own stream spawned from ``config.seed``."""
    t = np.arange(config.n_samples) / config.fs
    streams = np.random.SeedSequence(config.seed).spawn(config.n_subjects)
    records: List[PpgRecord] = []
    for i, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        hb = float(rng.uniform(*config.hb_range))
        heart_rate = float(rng.uniform(*config.heart_rate_range))
        sex = "male" if rng.integers(0, 2) == 1 else "female"
        age = float(round(rng.uniform(*config.age_range)))
        phase = float(rng.uniform(0.0, 2.0 * math.pi))
        channels: Dict[Wavelength, np.ndarray] = {}
        for wavelength in WAVELENGTHS:
            weight = config.extinction_weights[wavelength.nm]
            dc, amplitude = channel_levels(hb, weight, config)
            x = clean_intensity(t, hb, heart_rate, weight, config, phase)
            noise = rng.standard_normal(t.size)
            if config.drift_amplitude:
                x = x + config.drift_amplitude * dc * np.sin(2.0 * math.pi * DRIFT_FREQUENCY_HZ * t)
            if config.noise_sd:
                x = x + config.noise_sd * amplitude * noise
            channels[wavelength] = x
        records.append(
            PpgRecord(
                subject_id=_subject_id(i, config.n_subjects),
                fs=config.fs,
                channels=channels,
                age=age,
                sex=sex,
                hb_ref=hb,
            )
        )
    logger.info("Generated %d synthetic subjects (%d samples each, seed %d)", len(records), t.size, config.seed)
    return records


def write_corpus(records: List[PpgRecord], signals_dir: Path, metadata_path: Path):
    """Signal CSV per subject plus the metadata CSV, in the formats the dataset loader reads."""
    signals_dir = Path(signals_dir)
    for record in records:
        save_record(record, signals_dir / f"{record.subject_id}.csv")
    save_metadata(
        [SubjectMeta(subject_id=r.subject_id, age=r.age, sex=r.sex, hb_ref=r.hb_ref) for r in records],
        metadata_path,
    )
