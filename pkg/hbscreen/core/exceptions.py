"""Exception hierarchy for hbscreen.

Every error carries a short ``kind`` and an ``exit_code`` so the CLI can turn it
into a single machine-parsable line. Domain errors also subclass ``ValueError``.
"""

from typing import Optional


class HbScreenError(Exception):
    """Base class for all hbscreen errors."""

    kind = "domain_error"
    exit_code = 5


class ConfigError(HbScreenError, ValueError):
    """Configuration or parameter precondition violated."""

    kind = "config"
    exit_code = 2


class MissingInputError(HbScreenError):
    """A stage input file does not exist."""

    kind = "missing_input"
    exit_code = 3


class MalformedInputError(HbScreenError, ValueError):
    """An input file exists but cannot be parsed."""

    kind = "malformed_input"
    exit_code = 4


class InvalidRecordError(MalformedInputError):
    """PPG record violates its channel/sampling invariants."""


class ModelFormatError(MalformedInputError):
    """Model file is truncated, malformed or of an unknown version."""

    kind = "model_format"

    def __init__(self, message: str, location: Optional[str] = None):
        self.location = location
        if location:
            message = f"{message} (at {location})"
        super().__init__(message)


class MissingMetadataError(MalformedInputError):
    """A subject has signal rows but no metadata."""


class InvalidBandError(ConfigError):
    """Bandpass edges outside 0 < low < high < fs/2."""


class RecordTooShortError(HbScreenError, ValueError):
    """Channel shorter than one segmentation window."""

    kind = "record_too_short"


class PsdSegmentTooShortError(HbScreenError, ValueError):
    """Welch segment length exceeds the number of samples."""

    kind = "psd_too_short"


class CorruptSegmentError(HbScreenError, ValueError):
    """Segment contains non-finite samples."""

    kind = "corrupt_segment"


class DegenerateFeatureTableError(HbScreenError, ValueError):
    """Cleaning removed every feature column."""

    kind = "degenerate_features"


class TooFewSubjectsError(HbScreenError, ValueError):
    """Not enough labeled subjects to split."""

    kind = "too_few_subjects"


class FeatureMismatchError(HbScreenError, ValueError):
    """Input features do not match the model's training features."""

    kind = "feature_mismatch"


class MissingCoverError(HbScreenError, ValueError):
    """Model nodes lack training populations needed for TreeSHAP."""

    kind = "missing_cover"


class NoSeverityRowError(HbScreenError, ValueError):
    """Population has no severity row in the threshold table."""

    kind = "no_severity_row"


class InvalidTrainingDataError(HbScreenError, ValueError):
    """Training matrix is empty, contains missing values or is too small."""

    kind = "invalid_training_data"
