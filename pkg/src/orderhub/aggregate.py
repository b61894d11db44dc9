"""Order aggregate rebuilt from journal events.

The orchestrator never mutates an aggregate directly: it appends an event
and then applies the stored record, so the live aggregate and one replayed
from the journal go through the same code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .compensation import CompensationStep, UndoBuffer, UndoEntry, UndoStrategy
from .errors import CorruptJournal, NotFound
from .fulfillment.actions import FulfillmentResult, Status
from .fulfillment.platforms import StateSnapshot
from .journal import Journal, JournalRecord
from .management.plan import ExecutionPlan, apply_result, mark_dispatched
from .model import CanonicalOrder, OrderEvent, OrderState, SubOrder, SubOrderState, transition


@dataclass
class OrderAggregate:
    order_id: str
    state: OrderState = OrderState.CAPTURED
    order: CanonicalOrder | None = None
    failures: list[tuple[str, str]] = field(default_factory=list)
    plan: ExecutionPlan | None = None
    attempts: dict[str, int] = field(default_factory=dict)
    dispatches: list[tuple[str, int]] = field(default_factory=list)
    last_results: dict[str, FulfillmentResult] = field(default_factory=dict)
    checkpoints: dict[str, StateSnapshot] = field(default_factory=dict)
    tasks: dict[str, str] = field(default_factory=dict)
    undo: UndoBuffer = field(default_factory=UndoBuffer)
    steps: list[CompensationStep] = field(default_factory=list)
    diagnostic: str = ""
    last_seq: int = 0

    # -- queries ----------------------------------------------------------------

    @property
    def in_flight(self) -> list[str]:
        return self.plan.in_state(SubOrderState.DISPATCHED) if self.plan else []

    @property
    def waiting(self) -> list[str]:
        return self.plan.in_state(SubOrderState.WAITING_HUMAN) if self.plan else []

    def compensated_entries(self) -> set[str]:
        return {s.entry_id for s in self.steps if s.ok}

    # -- event application --------------------------------------------------------

    def apply(self, rec: JournalRecord) -> "OrderAggregate":
        if rec.order_id != self.order_id:
            raise ValueError(f"record for {rec.order_id} applied to {self.order_id}")
        handler = getattr(self, "_on_" + rec.event, None)
        if handler is None:
            raise CorruptJournal(f"seq {rec.seq}: unknown event {rec.event!r}")
        handler(rec.payload)
        self.last_seq = rec.seq
        return self

    def _to(self, event: OrderEvent) -> None:
        self.state = transition(self.state, event)

    def _on_captured(self, p: dict) -> None:
        self.order = CanonicalOrder.from_dict(p["order"])
        self.state = OrderState.CAPTURED

    def _on_validated(self, p: dict) -> None:
        self.failures = [tuple(f) for f in p.get("failures", [])]
        self._to(OrderEvent.VALIDATION_PASSED if p["passed"] else OrderEvent.VALIDATION_FAILED)
        if not p["passed"]:
            self.diagnostic = "; ".join(f"{r}: {m}" for r, m in self.failures)

    def _on_decomposed(self, p: dict) -> None:
        nodes = {d["suborder_id"]: SubOrder.from_dict(d) for d in p["suborders"]}
        edges = frozenset((dep, sid) for sid, n in nodes.items() for dep in n.depends_on)
        self.plan = ExecutionPlan(nodes=nodes, edges=edges, bindings=dict(p.get("bindings", {})))
        self._to(OrderEvent.DECOMPOSED)

    def _on_started(self, p: dict) -> None:
        self._to(OrderEvent.FULFILLMENT_STARTED)

    def _on_checkpoint(self, p: dict) -> None:
        self.checkpoints[p["suborder_id"]] = StateSnapshot.from_dict(p["snapshot"])

    def _on_dispatched(self, p: dict) -> None:
        sid = p["suborder_id"]
        mark_dispatched(self.plan, sid)
        self.attempts[sid] = int(p["attempt"])
        self.dispatches.append((sid, int(p["attempt"])))

    def _on_result(self, p: dict) -> None:
        result = FulfillmentResult.from_dict(p["result"])
        apply_result(self.plan, result.suborder_id, result)
        self.last_results[result.suborder_id] = result

    def _on_task_opened(self, p: dict) -> None:
        self.tasks[p["suborder_id"]] = p["task_id"]

    def _on_undo_recorded(self, p: dict) -> None:
        entry = UndoEntry.from_dict(p["entry"])
        snap = self.checkpoints.get(entry.suborder_id) if entry.strategy is UndoStrategy.CHECKPOINT else None
        self.undo.add(entry, snap)

    def _on_compensating(self, p: dict) -> None:
        self._to(OrderEvent.FATAL_FULFILLMENT_FAILURE)
        self.diagnostic = p.get("reason", "")

    def _on_compensation_step(self, p: dict) -> None:
        step = CompensationStep.from_dict(p["step"])
        self.steps.append(step)
        if step.ok and self.plan and step.suborder_id in self.plan.nodes:
            self.plan.nodes[step.suborder_id].state = SubOrderState.COMPENSATED

    def _on_compensated(self, p: dict) -> None:
        self._to(OrderEvent.COMPENSATION_SUCCEEDED if p["ok"] else OrderEvent.COMPENSATION_FAILED)
        if not p["ok"]:
            self.diagnostic = p.get("reason", self.diagnostic)

    def _on_completed(self, p: dict) -> None:
        self._to(OrderEvent.ALL_DONE)

    # -- comparison ---------------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "order_id": self.order_id,
            "state": self.state.value,
            "order": self.order.to_dict() if self.order else None,
            "failures": [list(f) for f in self.failures],
            "plan": self.plan.to_dict() if self.plan else None,
            "attempts": dict(sorted(self.attempts.items())),
            "dispatches": [list(d) for d in self.dispatches],
            "results": {k: r.to_dict() for k, r in sorted(self.last_results.items())},
            "checkpoints": {k: s.to_dict() for k, s in sorted(self.checkpoints.items())},
            "tasks": dict(sorted(self.tasks.items())),
            "undo": [e.to_dict() for e in self.undo.entries.values()],
            "steps": [s.to_dict() for s in self.steps],
            "diagnostic": self.diagnostic,
            "last_seq": self.last_seq,
        }

    def summary(self) -> dict[str, Any]:
        """What `order status` prints."""
        out: dict[str, Any] = {"order_id": self.order_id, "state": self.state.value}
        if self.order:
            out["channel"] = self.order.channel_id
            out["customer"] = self.order.customer.customer_id
        if self.failures:
            out["failures"] = [list(f) for f in self.failures]
        if self.plan:
            out["suborders"] = {sid: n.state.value for sid, n in sorted(self.plan.nodes.items())}
            out["bindings"] = dict(sorted(self.plan.bindings.items()))
        out["dispatches"] = [f"{sid}#{n}" for sid, n in self.dispatches]
        if self.tasks:
            out["tasks"] = dict(sorted(self.tasks.items()))
        if self.steps:
            out["compensation"] = {"ok": all(s.ok for s in self.steps), "steps": [s.to_dict() for s in self.steps]}
        if self.diagnostic:
            out["diagnostic"] = self.diagnostic
        return out


def journal_replay(journal: Journal, order_id: str, upto: int | None = None) -> OrderAggregate:
    """Rebuild one order from its journal records (optionally only records with seq <= upto)."""
    records = [r for r in journal.records_for(order_id) if upto is None or r.seq <= upto]
    if not records:
        raise NotFound(f"order {order_id} not found")
    agg = OrderAggregate(order_id)
    for rec in records:
        agg.apply(rec)
    return agg


def replay_all(journal: Journal) -> dict[str, OrderAggregate]:
    aggs: dict[str, OrderAggregate] = {}
    for rec in journal:
        agg = aggs.setdefault(rec.order_id, OrderAggregate(rec.order_id))
        agg.apply(rec)
    return aggs


def is_failure(result: FulfillmentResult) -> bool:
    return result.status in (Status.RETRYABLE_FAILURE, Status.FATAL_FAILURE)
