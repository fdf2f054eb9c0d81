"""
hbscreen - Non-invasive hemoglobin estimation and anemia screening from multichannel PPG

Pipeline:
- Signal: segmentation, zero-phase Butterworth bandpass, Welch PSD, SNR/SQI, pulse landmarks
- Features: time-domain, optical (AC/DC), spectral and cross-wavelength features per segment
- Dataset: metadata ingestion, subject-level mean/median aggregation, Hb-stratified subject split
- Model: from-scratch gradient-boosted regression trees with cover-annotated nodes
- Explain: exact TreeSHAP attributions, global/category/wavelength importance
- Screening: WHO threshold severity grading, adult sex-specific rule, Bland-Altman agreement
- Synth: Beer-Lambert synthetic corpus with known Hb for end-to-end checks
"""

__version__ = "0.1.0"
__author__ = "hbscreen Team"
__description__ = "hbscreen - PPG hemoglobin estimation and WHO anemia screening"

from .core.config import Config, PipelineConfig
from .core.logging_config import logging_service

__all__ = ["Config", "PipelineConfig", "logging_service"]
