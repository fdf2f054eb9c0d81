"""
hbscreen Test Suite

This package contains all tests for the hbscreen pipeline:
- Signal tests (segmentation, bandpass, Welch PSD, SNR/SQI, peaks)
- Feature and dataset tests (feature table, cleaning, aggregation, split)
- Model tests (boosted trees, TreeSHAP, screening)
- End-to-end tests (CLI pipeline on a synthetic corpus)
"""

__version__ = "0.1.0"
