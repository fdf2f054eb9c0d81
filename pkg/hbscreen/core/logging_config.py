"""
Centralized Logging Configuration for hbscreen

Each pipeline service gets its own rotating log file. Service loggers are the
module loggers of the code that owns the service, so library modules simply use
``logging.getLogger(__name__)``:

- signal     -> hbscreen.tools.signal_processing
- features   -> hbscreen.tools.feature_extraction
- dataset    -> hbscreen.tools.dataset_service
- gbm        -> hbscreen.tools.gbm_regressor
- explain    -> hbscreen.tools.shap_explainer
- screening  -> hbscreen.tools.anemia_screening
- synth      -> hbscreen.tools.synthetic_ppg
- pipeline   -> hbscreen.cli
- audit      -> hbscreen.core.audit
- system     -> hbscreen (everything else)
"""

import logging
import logging.handlers
from pathlib import Path
from typing import Dict, Optional

from .config import Config

config = Config.get_instance()

DETAILED_FORMAT = "%(asctime)s | %(name)s | %(levelname)s | %(funcName)s:%(lineno)d | %(message)s"
SIMPLE_FORMAT = "%(asctime)s | %(levelname)s | %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

SERVICES = {
    "signal": ("hbscreen.tools.signal_processing", "Segmentation, bandpass filtering, SNR/SQI"),
    "features": ("hbscreen.tools.feature_extraction", "Per-segment features, table cleaning"),
    "dataset": ("hbscreen.tools.dataset_service", "Metadata ingestion, aggregation, split"),
    "gbm": ("hbscreen.tools.gbm_regressor", "Boosted regression training and evaluation"),
    "explain": ("hbscreen.tools.shap_explainer", "TreeSHAP attributions and importance"),
    "screening": ("hbscreen.tools.anemia_screening", "WHO threshold screening, agreement"),
    "synth": ("hbscreen.tools.synthetic_ppg", "Synthetic multichannel PPG generation"),
    "pipeline": ("hbscreen.cli", "CLI stage orchestration"),
    "audit": ("hbscreen.core.audit", "Subject ids consumed per stage"),
    "system": ("hbscreen", "Startup, configuration, uncategorised"),
}


class ServiceLogger:
    """Centralized logging configuration for all hbscreen services."""

    def __init__(self, log_dir: Optional[str] = None):
        self.log_dir = Path(log_dir or config.log_dir)
        self.log_dir.mkdir(exist_ok=True, parents=True)
        self.level = getattr(logging, config.log_level.upper(), logging.INFO)
        self.loggers: Dict[str, logging.Logger] = {}
        self._setup_logging()

    def _setup_logging(self):
        """Set up logging configuration for all services."""
        detailed_formatter = logging.Formatter(DETAILED_FORMAT, datefmt=DATE_FORMAT)
        simple_formatter = logging.Formatter(SIMPLE_FORMAT, datefmt=DATE_FORMAT)

        for service_name, (logger_name, _description) in SERVICES.items():
            formatter = simple_formatter if service_name == "audit" else detailed_formatter
            # the CLI reports its own failures on stderr as a single line
            self.loggers[service_name] = self._create_service_logger(
                logger_name, self.log_dir / f"{service_name}.log", formatter, console=service_name != "pipeline"
            )

        system_logger = self.get_logger("system")
        system_logger.debug("Log Directory: %s | Log Level: %s", self.log_dir.absolute(), config.log_level)

    def _create_service_logger(
        self, logger_name: str, log_file: Path, formatter: logging.Formatter, console: bool = True
    ) -> logging.Logger:
        """Create a logger for a specific service with file rotation."""
        logger = logging.getLogger(logger_name)
        logger.setLevel(self.level)

        # Remove existing handlers to avoid duplicates
        for handler in logger.handlers[:]:
            logger.removeHandler(handler)

        # File handler with rotation (10MB max, keep 5 files)
        file_handler = logging.handlers.RotatingFileHandler(
            log_file,
            maxBytes=10 * 1024 * 1024,
            backupCount=5,
            encoding="utf-8",
        )
        file_handler.setFormatter(formatter)
        file_handler.setLevel(self.level)
        logger.addHandler(file_handler)

        # Console handler for errors and warnings
        if console and self.level <= logging.WARNING:
            console_handler = logging.StreamHandler()
            console_handler.setFormatter(formatter)
            console_handler.setLevel(logging.WARNING)
            logger.addHandler(console_handler)

        # Service files stay separate from the package-level system log
        logger.propagate = logger_name == "hbscreen"

        return logger

    def get_logger(self, service_name: str) -> logging.Logger:
        """Get logger for a specific service."""
        if service_name not in self.loggers:
            return logging.getLogger(f"hbscreen.{service_name}")
        return self.loggers[service_name]

    def log_stage_start(self, stage: str, details: Optional[Dict] = None):
        """Log pipeline stage start with optional details."""
        logger = self.get_logger("pipeline")
        logger.info("Stage %s starting", stage)
        for key, value in (details or {}).items():
            logger.info("   %s: %s", key, value)

    def log_stage_finish(self, stage: str, details: Optional[Dict] = None):
        """Log pipeline stage completion with result counts."""
        logger = self.get_logger("pipeline")
        summary = ", ".join(f"{k}={v}" for k, v in (details or {}).items())
        logger.info("Stage %s finished %s", stage, summary)

    def log_error_with_context(self, service_name: str, error: Exception, context: Optional[Dict] = None):
        """Log error with additional context."""
        logger = self.get_logger(service_name)
        logger.error("Error in %s: %s", service_name, error)
        if context:
            logger.error("Context: %s", context)
        logger.debug("Full traceback:", exc_info=error)


# Global logging service instance
logging_service = ServiceLogger()
