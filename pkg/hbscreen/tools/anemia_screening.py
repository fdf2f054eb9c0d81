"""Anemia screening from predicted Hb.

Thresholds live in a versioned JSON table (``core/who_thresholds.json``) stored
in g/dL exactly as published and converted on use; every other quantity in the
package is g/L.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, model_validator

from ..core.exceptions import ConfigError, MissingInputError, NoSeverityRowError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD_PATH = Path(__file__).resolve().parent.parent / "core" / "who_thresholds.json"
DEFAULT_OFFSETS_G_L = (-10.0, -7.5, -5.0, -2.5, 0.0, 2.5, 5.0, 7.5, 10.0)
LOA_Z = 1.96


class Population(str, Enum):
    CHILD_6_59M = "child_6_59m"
    CHILD_5_11Y = "child_5_11y"
    CHILD_12_14Y = "child_12_14y"
    NONPREGNANT_WOMAN_15PLUS = "nonpregnant_woman_15plus"
    PREGNANT_WOMAN = "pregnant_woman"
    ADULT_MALE = "adult_male"
    ADULT_FEMALE = "adult_female"

    @classmethod
    def adult(cls, sex: str) -> "Population":
        return cls.ADULT_MALE if sex == "male" else cls.ADULT_FEMALE


class AnemiaStatus(str, Enum):
    NON_ANEMIC = "non_anemic"
    ANEMIC = "anemic"
    MILD = "mild"
    MODERATE = "moderate"
    SEVERE = "severe"


def g_dl_to_g_l(value: float) -> float:
    return value * 10.0


def g_l_to_g_dl(value: float) -> float:
    return value / 10.0


class SeverityBands(BaseModel):
    """One population row, g/dL as printed."""

    label: str
    mild: Tuple[float, float]
    moderate: Tuple[float, float]
    severe_below: float = Field(..., gt=0)

    @model_validator(mode="after")
    def _ordered(self) -> "SeverityBands":
        if not (self.severe_below == self.moderate[0] < self.moderate[1] < self.mild[0] <= self.mild[1]):
            raise ValueError(f"severity bands for {self.label} are not ordered severe < moderate < mild")
        return self

    def intervals(self) -> List[Tuple[AnemiaStatus, float, float]]:
        """Half-open [lo, hi) intervals except the mild band, which includes its printed top."""
        return [
            (AnemiaStatus.SEVERE, 0.0, self.severe_below),
            (AnemiaStatus.MODERATE, self.moderate[0], self.mild[0]),
            (AnemiaStatus.MILD, self.mild[0], self.mild[1]),
        ]


@dataclass
class ThresholdSnapshot:
    version: str
    checksum: str
    unit: str
    bands: Dict[Population, SeverityBands]
    adult_binary_g_l: Dict[str, float]


def _sha256(s: str) -> str:
    return hashlib.sha256(s.encode("utf-8")).hexdigest()


class ThresholdTable:
    """Loads and serves the threshold table; each load yields an immutable snapshot."""

    def __init__(self, path: Optional[Path] = None):
        self._lock = threading.RLock()
        self._snapshot: Optional[ThresholdSnapshot] = None
        self._path = Path(path) if path else DEFAULT_THRESHOLD_PATH

    def load_from_dict(self, data: Dict[str, Any]) -> ThresholdSnapshot:
        if data.get("unit") != "g/dL":
            raise ConfigError(f"threshold table unit must be g/dL, got {data.get('unit')!r}")
        try:
            bands = {Population(k): SeverityBands.model_validate(v) for k, v in data["populations"].items()}
            binary = {str(k): float(v) for k, v in data["adult_binary_g_per_l"].items()}
        except (KeyError, ValueError, ValidationError) as e:
            raise ConfigError(f"invalid threshold table: {e}") from e
        if set(binary) != {"male", "female"}:
            raise ConfigError("adult_binary_g_per_l must define male and female thresholds")
        snap = ThresholdSnapshot(
            version=str(data.get("version", "v1")),
            checksum=_sha256(json.dumps(data, sort_keys=True)),
            unit="g/dL",
            bands=bands,
            adult_binary_g_l=binary,
        )
        with self._lock:
            old, self._snapshot = self._snapshot, snap
        if old and old.checksum != snap.checksum:
            logger.info("Threshold table changed %s -> %s (%s)", old.version, snap.version, snap.checksum[:12])
        return snap

    def load_from_file(self) -> ThresholdSnapshot:
        if not self._path.exists():
            raise MissingInputError(f"threshold table not found: {self._path}")
        return self.load_from_dict(json.loads(self._path.read_text(encoding="utf-8")))

    def snapshot(self) -> ThresholdSnapshot:
        with self._lock:
            if self._snapshot is None:
                self.load_from_file()
            return self._snapshot


def _bands(population: Population, snap: ThresholdSnapshot) -> SeverityBands:
    population = Population(population)
    if population not in snap.bands:
        raise NoSeverityRowError(
            f"no severity row in the threshold table for {population.value} (binary adult rule only)"
        )
    return snap.bands[population]


class ScreeningResult(BaseModel):
    subject_id: str
    predicted_hb_g_l: float
    sex: str
    population: Population
    status: AnemiaStatus


@dataclass
class BlandAltman:
    bias: float
    sd: float
    loa_low: float
    loa_high: float
    pairs: List[Tuple[float, float]]  # (mean, diff)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.pairs, columns=["mean", "diff"])

    def summary(self) -> Dict[str, float]:
        return {"bias": self.bias, "sd": self.sd, "loa_low": self.loa_low, "loa_high": self.loa_high}


class AnemiaScreeningService:
    """Threshold lookups and screening summaries against one threshold table."""

    def __init__(self, table: Optional[ThresholdTable] = None):
        self.table = table or ThresholdTable()

    def grade_severity(self, hb_g_l: float, population: Population) -> AnemiaStatus:
        bands = _bands(population, self.table.snapshot())
        hb = g_l_to_g_dl(hb_g_l)
        if not math.isfinite(hb):
            raise ValueError(f"hb must be finite, got {hb_g_l}")
        if hb < bands.severe_below:
            return AnemiaStatus.SEVERE
        if hb < bands.mild[0]:
            return AnemiaStatus.MODERATE
        if hb <= bands.mild[1]:
            return AnemiaStatus.MILD
        return AnemiaStatus.NON_ANEMIC

    def adult_threshold(self, sex: str) -> float:
        try:
            return self.table.snapshot().adult_binary_g_l[sex]
        except KeyError:
            raise ValueError(f"sex must be 'male' or 'female', got {sex!r}") from None

    def screen_adult(self, hb_g_l: float, sex: str) -> AnemiaStatus:
        if not math.isfinite(hb_g_l):
            raise ValueError(f"hb must be finite, got {hb_g_l}")
        return AnemiaStatus.ANEMIC if hb_g_l < self.adult_threshold(sex) else AnemiaStatus.NON_ANEMIC

    def screen_subject(
        self, subject_id: str, hb_g_l: float, sex: str, population: Optional[Population] = None
    ) -> ScreeningResult:
        population = Population(population) if population else Population.adult(sex)
        if population in (Population.ADULT_MALE, Population.ADULT_FEMALE):
            status = self.screen_adult(hb_g_l, "male" if population == Population.ADULT_MALE else "female")
        else:
            status = self.grade_severity(hb_g_l, population)
        return ScreeningResult(
            subject_id=subject_id, predicted_hb_g_l=hb_g_l, sex=sex, population=population, status=status
        )

    def screen_population(self, predictions: pd.DataFrame) -> List[ScreeningResult]:
        """Rows need ``subject_id``, ``hb_pred_g_l`` and ``sex``; ``population`` is optional."""
        has_population = "population" in predictions.columns
        results = []
        for row in predictions.itertuples(index=False):
            population = getattr(row, "population") if has_population else None
            results.append(self.screen_subject(str(row.subject_id), float(row.hb_pred_g_l), row.sex, population or None))
        return results

    def threshold_sensitivity(
        self, predictions: Iterable[Tuple[float, str]], offsets: Sequence[float] = DEFAULT_OFFSETS_G_L
    ) -> Dict[float, int]:
        """Anemic count per threshold offset (g/L) under the adult sex-specific rule."""
        pairs = list(predictions)
        hb = np.array([p[0] for p in pairs], dtype=float)
        thresholds = np.array([self.adult_threshold(p[1]) for p in pairs], dtype=float)
        counts: Dict[float, int] = {}
        for delta in sorted(float(d) for d in offsets):
            if not math.isfinite(delta):
                raise ValueError(f"offsets must be finite, got {delta}")
            counts[delta] = int(np.sum(hb < thresholds + delta))
        return counts


def sensitivity_stability(counts: Dict[float, int], window_g_l: float = 2.5) -> int:
    """Spread (max - min) of anemic counts over offsets within +/- window."""
    inside = [c for d, c in counts.items() if abs(d) <= window_g_l + 1e-12]
    return max(inside) - min(inside) if inside else 0


def status_distribution(results: Iterable[ScreeningResult]) -> Dict[str, int]:
    distribution = {s.value: 0 for s in AnemiaStatus}
    for r in results:
        distribution[r.status.value] += 1
    return distribution


def results_frame(results: Iterable[ScreeningResult]) -> pd.DataFrame:
    rows = [
        {"subject_id": r.subject_id, "predicted_hb_g_l": r.predicted_hb_g_l, "sex": r.sex, "status": r.status.value}
        for r in results
    ]
    return pd.DataFrame(rows, columns=["subject_id", "predicted_hb_g_l", "sex", "status"])


def bland_altman(y_pred: Sequence[float], y_true: Sequence[float]) -> BlandAltman:
    y_pred = np.asarray(y_pred, dtype=float)
    y_true = np.asarray(y_true, dtype=float)
    if y_pred.shape != y_true.shape:
        raise ValueError(f"length mismatch: {y_pred.shape[0]} vs {y_true.shape[0]}")
    if y_true.size < 2:
        raise ValueError("Bland-Altman analysis needs at least two pairs")
    diff = y_pred - y_true
    mean = (y_pred + y_true) / 2.0
    bias = float(np.mean(diff))
    sd = float(np.std(diff, ddof=1))
    return BlandAltman(
        bias=bias,
        sd=sd,
        loa_low=bias - LOA_Z * sd,
        loa_high=bias + LOA_Z * sd,
        pairs=[(float(m), float(d)) for m, d in zip(mean, diff)],
    )


# Create service instance
screening_service = AnemiaScreeningService()


def grade_severity(hb_g_l: float, population: Population) -> AnemiaStatus:
    return screening_service.grade_severity(hb_g_l, population)


def screen_adult(hb_g_l: float, sex: str) -> AnemiaStatus:
    return screening_service.screen_adult(hb_g_l, sex)


def threshold_sensitivity(
    predictions: Iterable[Tuple[float, str]], offsets: Sequence[float] = DEFAULT_OFFSETS_G_L
) -> Dict[float, int]:
    return screening_service.threshold_sensitivity(predictions, offsets)
