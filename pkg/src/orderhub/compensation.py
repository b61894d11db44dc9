"""Non-linear undo buffer with inverse-command and checkpoint compensation.

Each completed sub-order leaves one undo entry. Entries form a DAG that
mirrors the plan (plus same-target sequencing), and compensation walks it
backwards: an entry is undone only after every entry that depends on it.
Independent branches may be undone in any order.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from .catalog import load_yaml_document
from .errors import DuplicateEntry, NoInverse, ParseError, UnknownTarget
from .fulfillment.actions import Action, Verb
from .fulfillment.platforms import StateSnapshot
from .model import SubOrder

log = logging.getLogger(__name__)


class UndoStrategy(str, enum.Enum):
    INVERSE_COMMAND = "INVERSE_COMMAND"
    CHECKPOINT = "CHECKPOINT"

    @classmethod
    def parse(cls, text: str) -> "UndoStrategy":
        t = text.strip().upper()
        if t in ("INVERSE", "INVERSE_COMMAND", "COMMAND"):
            return cls.INVERSE_COMMAND
        if t in ("CHECKPOINT", "MEMENTO"):
            return cls.CHECKPOINT
        raise ValueError(f"unknown undo strategy {text!r}")


_TWO_WAY = {
    Verb.CREATE_SUBSCRIPTION: Verb.CANCEL_SUBSCRIPTION,
    Verb.INSTALL_CPE: Verb.REMOVE_CPE,
    Verb.SCHEDULE_VISIT: Verb.CANCEL_VISIT,
    Verb.PROVISION_BILLING: Verb.DEPROVISION_BILLING,
}
INVERSES: dict[Verb, Verb] = {**_TWO_WAY, **{v: k for k, v in _TWO_WAY.items()}}
CHECKPOINT_ONLY = frozenset({Verb.COMMIT_ADDRESS, Verb.COMPLETE_TASK})


def inverse_of(verb: Verb | str) -> Verb:
    verb = Verb(verb)
    try:
        return INVERSES[verb]
    except KeyError:
        raise NoInverse(f"{verb.value} has no inverse; use a checkpoint") from None


@dataclass(frozen=True)
class StrategyConfig:
    default: UndoStrategy = UndoStrategy.INVERSE_COMMAND
    overrides: Mapping[tuple[str, Verb], UndoStrategy] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> "StrategyConfig":
        data = data or {}
        default = UndoStrategy.parse(str(data.get("default", "INVERSE_COMMAND")))
        overrides = {}
        for entry in data.get("overrides") or []:
            text = str(entry)
            try:
                lhs, strategy = text.split("=", 1)
                target, verb = lhs.split(":", 1)
                overrides[(target.strip(), Verb(verb.strip().upper()))] = UndoStrategy.parse(strategy)
            except ValueError:
                raise ParseError(f"strategy override {text!r} is not target:VERB=STRATEGY") from None
        return cls(default, overrides)

    def to_dict(self) -> dict[str, Any]:
        return {
            "default": self.default.value,
            "overrides": sorted(f"{t}:{v.value}={s.value}" for (t, v), s in self.overrides.items()),
        }


def load_strategy_config(text: str) -> StrategyConfig:
    data = load_yaml_document(text)
    if data is not None and not isinstance(data, dict):
        raise ParseError("strategy config must be a mapping")
    return StrategyConfig.from_dict(data)


def select_strategy(config: StrategyConfig, target_id: str, verb: Verb | str) -> UndoStrategy:
    try:
        verb = Verb(verb)
    except ValueError:
        return config.default
    return config.overrides.get((target_id, verb), config.default)


def entry_strategy(config: StrategyConfig, target_id: str, verbs: Iterable[Verb]) -> UndoStrategy:
    """One strategy per sub-order: checkpoint wins if any action asks for it or lacks an inverse."""
    verbs = list(verbs)
    if not verbs:
        return config.default
    chosen = {select_strategy(config, target_id, v) for v in verbs}
    if UndoStrategy.CHECKPOINT in chosen:
        return UndoStrategy.CHECKPOINT
    forced = sorted(v.value for v in verbs if v not in INVERSES)
    if forced:
        log.info("%s: %s has no inverse, forcing CHECKPOINT", target_id, ", ".join(forced))
        return UndoStrategy.CHECKPOINT
    return UndoStrategy.INVERSE_COMMAND


@dataclass(frozen=True)
class UndoEntry:
    entry_id: str
    suborder_id: str
    target_id: str
    strategy: UndoStrategy
    inverse_actions: tuple[Action, ...] = ()
    checkpoint_ref: str | None = None
    depends_on: frozenset[str] = frozenset()
    recorded_at: float = 0.0
    # the sub-order failed part-way; this entry undoes only what took effect
    partial: bool = False

    def __post_init__(self):
        if (self.strategy is UndoStrategy.CHECKPOINT) != (self.checkpoint_ref is not None):
            raise ValueError("checkpoint_ref must be set iff the strategy is CHECKPOINT")
        if self.strategy is UndoStrategy.CHECKPOINT and self.inverse_actions:
            raise ValueError("checkpoint entries carry no inverse actions")

    def to_dict(self) -> dict[str, Any]:
        return {
            "entry_id": self.entry_id,
            "suborder_id": self.suborder_id,
            "target_id": self.target_id,
            "strategy": self.strategy.value,
            "inverse_actions": [a.to_dict() for a in self.inverse_actions],
            "checkpoint_ref": self.checkpoint_ref,
            "depends_on": sorted(self.depends_on),
            "recorded_at": self.recorded_at,
            "partial": self.partial,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "UndoEntry":
        return cls(
            entry_id=d["entry_id"],
            suborder_id=d["suborder_id"],
            target_id=d["target_id"],
            strategy=UndoStrategy(d["strategy"]),
            inverse_actions=tuple(Action.from_dict(a) for a in d.get("inverse_actions", ())),
            checkpoint_ref=d.get("checkpoint_ref"),
            depends_on=frozenset(d.get("depends_on", ())),
            recorded_at=float(d.get("recorded_at", 0.0)),
            partial=bool(d.get("partial", False)),
        )


@dataclass
class UndoBuffer:
    entries: dict[str, UndoEntry] = field(default_factory=dict)
    snapshots: dict[str, StateSnapshot] = field(default_factory=dict)

    def add(self, entry: UndoEntry, snapshot: StateSnapshot | None = None) -> None:
        if entry.entry_id in self.entries or any(e.suborder_id == entry.suborder_id for e in self.entries.values()):
            raise DuplicateEntry(entry.suborder_id)
        unknown = entry.depends_on - self.entries.keys()
        if unknown:
            raise ValueError(f"entry depends on unknown entries {sorted(unknown)}")
        if snapshot is not None:
            self.snapshots[snapshot.snapshot_id] = snapshot
        self.entries[entry.entry_id] = entry

    def for_suborder(self, suborder_id: str) -> UndoEntry | None:
        for e in self.entries.values():
            if e.suborder_id == suborder_id:
                return e
        return None

    def dependents(self, entry_id: str) -> set[str]:
        return {e.entry_id for e in self.entries.values() if entry_id in e.depends_on}


def undo_entry_id(suborder_id: str) -> str:
    return f"U-{suborder_id}"


def inverse_actions_for(forward: Sequence[Action]) -> tuple[Action, ...]:
    out = []
    for idx, action in enumerate(reversed(forward)):
        out.append(Action(idx, inverse_of(action.verb), dict(action.params), action.idempotency_key + ":undo"))
    return tuple(out)


def make_entry(
    buffer: UndoBuffer,
    suborder: SubOrder,
    forward_actions: Sequence[Action],
    strategy: UndoStrategy,
    pre_snapshot: StateSnapshot | None,
    ancestors: Iterable[str] = (),
    recorded_at: float = 0.0,
    partial: bool = False,
) -> UndoEntry:
    """Build (without adding) the undo entry for a finished sub-order."""
    if buffer.for_suborder(suborder.suborder_id) is not None:
        raise DuplicateEntry(suborder.suborder_id)
    if strategy is UndoStrategy.INVERSE_COMMAND and any(a.verb not in INVERSES for a in forward_actions):
        log.info("%s: forcing CHECKPOINT, not every action is invertible", suborder.suborder_id)
        strategy = UndoStrategy.CHECKPOINT
    ancestors = set(ancestors)
    deps = set()
    for e in buffer.entries.values():
        # plan ancestry, plus earlier work on the same target: checkpoints
        # restore whole slices, so later work there must be undone first
        if e.suborder_id in ancestors or e.target_id == suborder.target_id:
            deps.add(e.entry_id)
    if strategy is UndoStrategy.CHECKPOINT:
        if pre_snapshot is None:
            raise ValueError(f"{suborder.suborder_id}: CHECKPOINT needs a pre-execution snapshot")
        return UndoEntry(
            undo_entry_id(suborder.suborder_id), suborder.suborder_id, suborder.target_id, strategy,
            checkpoint_ref=pre_snapshot.snapshot_id, depends_on=frozenset(deps), recorded_at=recorded_at, partial=partial,
        )
    return UndoEntry(
        undo_entry_id(suborder.suborder_id), suborder.suborder_id, suborder.target_id, strategy,
        inverse_actions=inverse_actions_for(forward_actions), depends_on=frozenset(deps),
        recorded_at=recorded_at, partial=partial,
    )


def record(
    buffer: UndoBuffer,
    suborder: SubOrder,
    forward_actions: Sequence[Action],
    strategy: UndoStrategy,
    pre_snapshot: StateSnapshot | None,
    ancestors: Iterable[str] = (),
    recorded_at: float = 0.0,
) -> UndoBuffer:
    entry = make_entry(buffer, suborder, forward_actions, strategy, pre_snapshot, ancestors, recorded_at)
    buffer.add(entry, pre_snapshot if entry.strategy is UndoStrategy.CHECKPOINT else None)
    return buffer


@dataclass(frozen=True)
class CompensationStep:
    entry_id: str
    suborder_id: str
    strategy: UndoStrategy
    ok: bool
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "entry_id": self.entry_id,
            "suborder_id": self.suborder_id,
            "strategy": self.strategy.value,
            "ok": self.ok,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CompensationStep":
        return cls(d["entry_id"], d["suborder_id"], UndoStrategy(d["strategy"]), bool(d["ok"]), d.get("detail", ""))


@dataclass
class CompensationReport:
    steps: list[CompensationStep] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(s.ok for s in self.steps)

    @property
    def order(self) -> list[str]:
        return [s.entry_id for s in self.steps]

    def to_dict(self) -> dict[str, Any]:
        return {"ok": self.ok, "steps": [s.to_dict() for s in self.steps]}


def _undo_one(entry: UndoEntry, buffer: UndoBuffer, registry) -> CompensationStep:
    try:
        adapter = registry.get(entry.target_id)
    except UnknownTarget as exc:
        return CompensationStep(entry.entry_id, entry.suborder_id, entry.strategy, False, str(exc))
    if entry.strategy is UndoStrategy.CHECKPOINT:
        snap = buffer.snapshots.get(entry.checkpoint_ref or "")
        if snap is None:
            return CompensationStep(entry.entry_id, entry.suborder_id, entry.strategy, False, "snapshot missing")
        try:
            adapter.restore(snap)
        except Exception as exc:  # adapter boundary: report, don't propagate
            return CompensationStep(entry.entry_id, entry.suborder_id, entry.strategy, False, str(exc))
        return CompensationStep(entry.entry_id, entry.suborder_id, entry.strategy, True, f"restored {snap.snapshot_id}")
    for action in entry.inverse_actions:
        outcome = adapter.execute_action(action)
        if not outcome.ok:
            detail = f"{action.verb.value} failed: {outcome.code} {outcome.message}".strip()
            return CompensationStep(entry.entry_id, entry.suborder_id, entry.strategy, False, detail)
    verbs = ",".join(a.verb.value for a in entry.inverse_actions)
    return CompensationStep(entry.entry_id, entry.suborder_id, entry.strategy, True, verbs)


def latest_first(ready: list[UndoEntry]) -> UndoEntry:
    return ready[-1]


def compensate(
    buffer: UndoBuffer,
    registry,
    *,
    chooser: Callable[[list[UndoEntry]], UndoEntry] = latest_first,
    done: Iterable[str] = (),
    on_step: Callable[[CompensationStep], None] | None = None,
    parallel: bool = False,
) -> CompensationReport:
    """Undo every entry, dependents before dependencies; stop at the first failure.

    ``done`` names entries already compensated (when resuming). ``chooser``
    picks among simultaneously eligible entries, which lets tests force
    either order on independent branches. With ``parallel`` all eligible
    entries run concurrently in waves.
    """
    report = CompensationReport()
    finished = set(done)
    order = list(buffer.entries)  # recording order
    while True:
        pending = [buffer.entries[i] for i in order if i not in finished]
        if not pending:
            return report
        ready = [e for e in pending if buffer.dependents(e.entry_id) <= finished]
        if not ready:
            raise RuntimeError("undo buffer is cyclic")
        batch = ready if parallel else [chooser(ready)]
        if len(batch) > 1:
            with ThreadPoolExecutor(max_workers=len(batch)) as pool:
                steps = list(pool.map(lambda e: _undo_one(e, buffer, registry), batch))
        else:
            steps = [_undo_one(batch[0], buffer, registry)]
        for step in steps:
            report.steps.append(step)
            if on_step:
                on_step(step)
            finished.add(step.entry_id)
        if not all(s.ok for s in steps):
            return report
