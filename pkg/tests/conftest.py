"""
Pytest configuration for the hbscreen test suite.

This file is automatically loaded by pytest and applies global configurations
including warning suppression for cleaner test output, plus shared fixtures.
"""

import warnings

import numpy as np
import pytest

# Suppress all common warnings for cleaner test output
warnings.filterwarnings('ignore', category=DeprecationWarning)
warnings.filterwarnings('ignore', category=UserWarning)
warnings.filterwarnings('ignore', category=RuntimeWarning, message='.*Mean of empty slice.*')
warnings.filterwarnings('ignore', message='.*Pydantic.*')
warnings.filterwarnings('ignore', message='.*sosfreqz.*')

from hbscreen.tools.signal_processing import WAVELENGTHS, PpgRecord
from hbscreen.tools.synthetic_ppg import SynthConfig, generate

FS = 100.0


def sine_record(subject_id="S001", n_samples=1000, fs=FS, freq=1.2, offset=10.0, hb_ref=130.0, sex="male"):
    """Four identical channels: offset + sin(2*pi*freq*t)."""
    t = np.arange(n_samples) / fs
    x = offset + np.sin(2 * np.pi * freq * t)
    return PpgRecord(
        subject_id=subject_id,
        fs=fs,
        channels={w: x.copy() for w in WAVELENGTHS},
        age=40.0,
        sex=sex,
        hb_ref=hb_ref,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus():
    """Twelve noise-free synthetic subjects, two windows each."""
    return generate(SynthConfig(n_subjects=12, duration_s=10.0, seed=7))
