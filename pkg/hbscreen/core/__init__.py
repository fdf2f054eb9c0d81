"""Configuration, logging, errors and the consumption audit."""

from .config import Config, PipelineConfig, load_pipeline_config
from .exceptions import HbScreenError

__all__ = ["Config", "PipelineConfig", "load_pipeline_config", "HbScreenError"]
