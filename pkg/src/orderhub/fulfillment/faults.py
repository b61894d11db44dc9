"""Deterministic fault injection: ``target:VERB:occurrence:KIND``."""

from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass
from typing import Iterable

from ..errors import ParseError
from .actions import Verb

FAULT_KINDS = ("RETRYABLE", "FATAL")


@dataclass(frozen=True)
class FaultSpec:
    target_id: str
    verb: Verb
    occurrence_n: int
    kind: str

    def __post_init__(self):
        if self.occurrence_n < 1:
            raise ValueError("occurrence_n must be >= 1")
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"fault kind must be one of {FAULT_KINDS}")

    def __str__(self) -> str:
        return f"{self.target_id}:{self.verb.value}:{self.occurrence_n}:{self.kind}"


def parse_fault(text: str) -> FaultSpec:
    parts = text.strip().split(":")
    if len(parts) != 4:
        raise ParseError(f"fault spec {text!r} is not target:VERB:occurrence:KIND")
    target, verb, n, kind = parts
    try:
        return FaultSpec(target, Verb(verb.upper()), int(n), kind.upper())
    except ValueError as exc:
        raise ParseError(f"fault spec {text!r}: {exc}") from None


class FaultPlan:
    """Counts real executions per (target, verb) and fires on the configured occurrence."""

    def __init__(self, specs: Iterable[FaultSpec | str] = ()):
        self.specs = [parse_fault(s) if isinstance(s, str) else s for s in specs]
        self.counts: Counter[tuple[str, Verb]] = Counter()
        self.fired: list[FaultSpec] = []
        self._lock = threading.Lock()

    def check(self, target_id: str, verb: Verb) -> FaultSpec | None:
        with self._lock:
            self.counts[(target_id, verb)] += 1
            n = self.counts[(target_id, verb)]
            for spec in self.specs:
                if spec.target_id == target_id and spec.verb is verb and spec.occurrence_n == n:
                    self.fired.append(spec)
                    return spec
            return None
