"""Append-only event journal, optionally persisted as JSON lines."""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator

from .errors import CorruptJournal, StorageError


@dataclass(frozen=True)
class JournalRecord:
    seq: int
    ts: float
    order_id: str
    event: str
    payload: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"seq": self.seq, "ts": self.ts, "order_id": self.order_id, "event": self.event, "payload": self.payload},
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> "JournalRecord":
        d = json.loads(text)
        return cls(int(d["seq"]), float(d["ts"]), str(d["order_id"]), str(d["event"]), d.get("payload") or {})


def _normalise(payload: dict[str, Any]) -> dict[str, Any]:
    # the in-memory record must look exactly like one read back from disk
    return json.loads(json.dumps(payload, sort_keys=True))


class Journal:
    """Single-writer journal. Appends are serialized engine-wide by a lock."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._records: list[JournalRecord] = []
        self._lock = threading.Lock()
        self.listeners: list = []
        if self.path and self.path.exists():
            self._records = list(_read(self.path))

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[JournalRecord]:
        return iter(list(self._records))

    @property
    def last_seq(self) -> int:
        return self._records[-1].seq if self._records else 0

    def append(self, record: JournalRecord) -> int:
        """Append ``record``; its seq is assigned here and returned."""
        with self._lock:
            rec = replace(record, seq=self.last_seq + 1, payload=_normalise(record.payload))
            if self.path:
                try:
                    with self.path.open("a", encoding="utf-8") as fh:
                        fh.write(rec.to_json() + "\n")
                        fh.flush()
                        os.fsync(fh.fileno())
                except OSError as exc:
                    raise StorageError(f"journal append failed: {exc}") from exc
            self._records.append(rec)
        for listener in self.listeners:
            listener(rec)
        return rec.seq

    def record(self, order_id: str, event: str, payload: dict[str, Any] | None = None, ts: float = 0.0) -> JournalRecord:
        seq = self.append(JournalRecord(0, ts, order_id, event, payload or {}))
        return self._records[seq - 1]

    def records_for(self, order_id: str) -> list[JournalRecord]:
        return [r for r in self._records if r.order_id == order_id]

    def order_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self._records:
            seen.setdefault(r.order_id, None)
        return list(seen)


def _read(path: Path) -> Iterator[JournalRecord]:
    expected = 1
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = JournalRecord.from_json(line)
            except (ValueError, KeyError, TypeError) as exc:
                raise CorruptJournal(f"{path}:{lineno}: undecodable record ({exc})") from None
            if rec.seq != expected:
                raise CorruptJournal(f"{path}:{lineno}: expected seq {expected}, found {rec.seq}")
            expected += 1
            yield rec


def journal_append(journal: Journal, record: JournalRecord) -> int:
    return journal.append(record)
