"""Append-only event log for non-fatal warnings and failures.

One log is shared per run and written to ``errors.jsonl``. Records carry
no timestamps so that replayed runs stay byte-identical.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Event:
    kind: str
    detail: str
    chunk_id: str = ""
    mode: str = ""
    step: int = 0

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "chunk_id": self.chunk_id,
            "mode": self.mode,
            "step": self.step,
            "detail": self.detail,
        }


class EventLog:
    """Thread-safe sink; extraction workers share one instance per run."""

    def __init__(self) -> None:
        self._records: list[Event] = []
        self._lock = threading.Lock()

    def emit(self, kind: str, detail: str, chunk_id: str = "", mode: str = "", step: int = 0) -> None:
        event = Event(kind=kind, detail=detail, chunk_id=chunk_id, mode=mode, step=step)
        with self._lock:
            self._records.append(event)
        logger.warning("%s [%s/%s]: %s", kind, chunk_id or "-", mode or "-", detail)

    @property
    def records(self) -> tuple[Event, ...]:
        with self._lock:
            return tuple(self._records)

    def count(self, kind: str) -> int:
        return sum(1 for e in self.records if e.kind == kind)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for event in self.records:
                fh.write(json.dumps(event.to_record(), ensure_ascii=False))
                fh.write("\n")
