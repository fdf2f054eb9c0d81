"""Configuration management for hbscreen.

Two layers:
- ``Config``: process-level settings from the environment / ``.env`` (``HBSCREEN_*``).
- ``PipelineConfig``: the versioned JSON run configuration used by the CLI.
"""

import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .exceptions import ConfigError, MalformedInputError, MissingInputError

PIPELINE_SCHEMA_VERSION = "1"


# Find project root and load .env file
def find_project_root() -> Path:
    """Find the project root directory containing .env file."""
    current_path = Path(__file__).resolve()
    for parent in current_path.parents:
        if (parent / ".env").exists():
            return parent
    return Path.cwd()


project_root = find_project_root()
load_dotenv(project_root / ".env")


class Config(BaseSettings):
    """Process-level settings for hbscreen."""

    # Logging
    log_level: str = Field("INFO")
    log_dir: str = Field("/tmp/hbscreen")

    # Pipeline defaults
    default_fs: float = Field(100.0, gt=10.0)  # dataset sampling rate is not published
    default_seed: int = Field(42)

    debug: bool = Field(False)

    model_config = SettingsConfigDict(
        env_prefix="HBSCREEN_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    @classmethod
    def get_instance(cls) -> "Config":
        """Get singleton instance of configuration."""
        if not hasattr(cls, "_instance"):
            cls._instance = cls()
        return cls._instance


class PathSettings(BaseModel):
    """Input and output locations. Relative paths resolve against ``out_dir``."""

    out_dir: str = "hbscreen_out"
    signals_dir: str = "signals"
    metadata_csv: str = "metadata.csv"

    def resolve(self, name: str) -> Path:
        path = Path(name)
        return path if path.is_absolute() else Path(self.out_dir) / path

    @property
    def signals_path(self) -> Path:
        return self.resolve(self.signals_dir)

    @property
    def metadata_path(self) -> Path:
        return self.resolve(self.metadata_csv)

    @model_validator(mode="after")
    def _distinct(self) -> "PathSettings":
        paths = [Path(self.out_dir).resolve(), self.signals_path.resolve(), self.metadata_path.resolve()]
        if len(set(paths)) != len(paths):
            raise ValueError("out_dir, signals_dir and metadata_csv must be distinct paths")
        return self


class SignalSettings(BaseModel):
    """Segmentation, filtering and spectral estimation."""

    fs: float = Field(100.0, gt=10.0)
    window_len: int = Field(500, ge=2)
    band_low: float = Field(0.5, gt=0.0)
    band_high: float = Field(5.0, gt=0.0)
    filter_order: int = Field(3, ge=1, le=10)
    welch_nperseg: int = Field(250, ge=2)
    welch_overlap: float = Field(0.5, ge=0.0, lt=1.0)
    welch_window: str = "hann"
    peak_max_rate_hz: float = Field(3.0, gt=0.0)
    peak_prominence_factor: float = Field(0.25, ge=0.0)

    @model_validator(mode="after")
    def _check_band(self) -> "SignalSettings":
        if not (0.0 < self.band_low < self.band_high < self.fs / 2.0):
            raise ValueError(
                f"band [{self.band_low}, {self.band_high}] Hz must satisfy 0 < low < high < fs/2 = {self.fs / 2.0}"
            )
        if self.welch_nperseg > self.window_len:
            raise ValueError("welch_nperseg cannot exceed window_len")
        return self


class FeatureSettings(BaseModel):
    """Feature-table cleaning and subject aggregation."""

    nan_frac_max: float = Field(0.2, ge=0.0, le=1.0)
    var_min: float = Field(1e-12, ge=0.0)
    aggregation_ops: List[Literal["mean", "median"]] = Field(default_factory=lambda: ["mean", "median"])

    @model_validator(mode="after")
    def _check_ops(self) -> "FeatureSettings":
        if not self.aggregation_ops:
            raise ValueError("aggregation_ops must name at least one operator")
        if len(set(self.aggregation_ops)) != len(self.aggregation_ops):
            raise ValueError("aggregation_ops contains duplicates")
        return self


class SplitSettings(BaseModel):
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    seed: int = 42
    repeats: int = Field(0, ge=0)


class GbmSettings(BaseModel):
    """Boosting hyperparameters (none are reported for the published model)."""

    n_trees: int = Field(200, ge=0)
    learning_rate: float = Field(0.05, gt=0.0, le=1.0)
    max_depth: int = Field(3, ge=1)
    min_samples_leaf: int = Field(2, ge=1)


class ScreeningSettings(BaseModel):
    offsets_g_l: List[float] = Field(default_factory=lambda: [-10.0, -7.5, -5.0, -2.5, 0.0, 2.5, 5.0, 7.5, 10.0])
    stability_window_g_l: float = Field(2.5, ge=0.0)


class ExplainSettings(BaseModel):
    dependence_top_k: int = Field(3, ge=0)


class SynthSettings(BaseModel):
    """Synthetic corpus generation (see tools.synthetic_ppg.SynthConfig)."""

    n_subjects: int = Field(100, ge=1)
    duration_s: float = Field(30.0, gt=0.0)
    hb_range: Tuple[float, float] = (100.0, 170.0)
    heart_rate_range: Tuple[float, float] = (0.9, 1.6)
    noise_sd: float = Field(0.0, ge=0.0)
    drift_amplitude: float = Field(0.0, ge=0.0)


class PipelineConfig(BaseModel):
    """Single JSON run configuration for the CLI."""

    schema_version: str = PIPELINE_SCHEMA_VERSION
    seed: int = 42
    paths: PathSettings = Field(default_factory=PathSettings)
    signal: SignalSettings = Field(default_factory=SignalSettings)
    features: FeatureSettings = Field(default_factory=FeatureSettings)
    split: SplitSettings = Field(default_factory=SplitSettings)
    gbm: GbmSettings = Field(default_factory=GbmSettings)
    screening: ScreeningSettings = Field(default_factory=ScreeningSettings)
    explain: ExplainSettings = Field(default_factory=ExplainSettings)
    synth: SynthSettings = Field(default_factory=SynthSettings)

    @model_validator(mode="after")
    def _check_version(self) -> "PipelineConfig":
        if self.schema_version != PIPELINE_SCHEMA_VERSION:
            raise ValueError(
                f"unsupported config schema_version {self.schema_version!r} (expected {PIPELINE_SCHEMA_VERSION!r})"
            )
        return self

    @property
    def out_dir(self) -> Path:
        return Path(self.paths.out_dir)

    def with_overrides(self, seed: Optional[int] = None, out_dir: Optional[str] = None) -> "PipelineConfig":
        """Return a copy with CLI flag overrides applied."""
        data = self.model_dump()
        if seed is not None:
            data["seed"] = seed
            data["split"]["seed"] = seed
        if out_dir is not None:
            data["paths"]["out_dir"] = out_dir
        return build_pipeline_config(data)


def build_pipeline_config(data: dict) -> PipelineConfig:
    """Validate a config mapping, converting validation failures to ConfigError."""
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ())) or "<root>"
        raise ConfigError(f"invalid config at {where}: {first.get('msg')}") from e


def default_pipeline_config() -> PipelineConfig:
    """Defaults seeded from the process-level Config."""
    settings = Config.get_instance()
    return build_pipeline_config(
        {
            "seed": settings.default_seed,
            "signal": {"fs": settings.default_fs},
            "split": {"seed": settings.default_seed},
        }
    )


def load_pipeline_config(path: Path) -> PipelineConfig:
    """Load and validate a JSON pipeline config."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MalformedInputError(f"config {path} is not valid JSON: line {e.lineno} column {e.colno}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must contain a JSON object")
    return build_pipeline_config(data)
