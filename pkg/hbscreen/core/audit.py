"""Subject-consumption audit log.

Each stage appends one JSON line per consumption event to ``audit.jsonl`` so a
run can be checked afterwards for train/test leakage.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Set

logger = logging.getLogger(__name__)

ROLES = ("train", "test", "all")


@dataclass
class ConsumptionEvent:
    stage: str
    role: str
    subject_ids: List[str]
    event: str = "consume"


class ConsumptionAudit:
    """Append-only JSON-lines audit of subject ids consumed per stage."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def reset(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")

    def record(self, stage: str, role: str, subject_ids: Iterable[str]) -> ConsumptionEvent:
        if role not in ROLES:
            raise ValueError(f"unknown audit role {role!r}; expected one of {ROLES}")
        event = ConsumptionEvent(stage=stage, role=role, subject_ids=sorted(set(subject_ids)))
        payload = json.dumps(asdict(event), sort_keys=True)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(payload + "\n")
        logger.info(payload)
        return event

    def events(self) -> List[ConsumptionEvent]:
        if not self.path.exists():
            return []
        out = []
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                out.append(ConsumptionEvent(**json.loads(line)))
        return out


def verify_no_leakage(audit_path: Path, test_ids: Iterable[str], stage: Optional[str] = "train") -> Set[str]:
    """Return test ids that appear in any training-role event (empty set means clean)."""
    test = set(test_ids)
    leaked: Set[str] = set()
    for event in ConsumptionAudit(audit_path).events():
        if event.role != "train":
            continue
        if stage is not None and event.stage != stage:
            continue
        leaked |= test.intersection(event.subject_ids)
    if leaked:
        logger.error("Leakage detected: %d test subjects consumed during training", len(leaked))
    return leaked
