"""Order orchestration: validate, decompose, plan, dispatch, collect, compensate.

All state changes go through ``_emit``, which journals the event and then
applies the stored record to the order aggregate.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable, Sequence

from ..aggregate import OrderAggregate, journal_replay
from ..catalog import Catalog
from ..compensation import (
    StrategyConfig,
    UndoEntry,
    compensate,
    entry_strategy,
    latest_first,
    make_entry,
)
from ..errors import NotFound, OrderHubError, PlanError, UnknownProduct
from ..fulfillment.actions import FulfillmentResult, Status
from ..fulfillment.platforms import TargetRegistry
from ..fulfillment.service import REQUEST_QUEUE
from ..fulfillment.tasks import TaskStore
from ..journal import Journal
from ..model import OrderState, SubOrder, SubOrderState, order_bindings
from ..msgbus import Message, MessageBus
from ..wire import dispatch_to_xml, order_from_xml, result_from_xml
from .decompose import decompose
from .plan import binding_conflicts, build_plan, ready_nodes
from .rules import EnvironmentFacts, ValidationRule, validate_order

log = logging.getLogger(__name__)

RESULTS_QUEUE = "orders.results"


@dataclass(frozen=True)
class OrchestratorOptions:
    max_retries: int = 3
    retry_delay: float = 5.0
    parallel_dispatch: bool = False
    compensation_chooser: Callable[[list[UndoEntry]], UndoEntry] = latest_first


def correlation(order_id: str, suborder_id: str, attempt: int) -> str:
    return f"{order_id}|{suborder_id}|{attempt}"


def parse_correlation(text: str) -> tuple[str, str, int]:
    order_id, sid, attempt = text.split("|")
    return order_id, sid, int(attempt)


class Orchestrator:
    def __init__(
        self,
        *,
        bus: MessageBus,
        journal: Journal,
        catalog: Catalog,
        registry: TargetRegistry,
        tasks: TaskStore,
        rules: Sequence[ValidationRule] = (),
        facts: EnvironmentFacts | None = None,
        strategy: StrategyConfig | None = None,
        options: OrchestratorOptions | None = None,
    ):
        self.bus = bus
        self.clock = bus.clock
        self.journal = journal
        self.catalog = catalog
        self.registry = registry
        self.tasks = tasks
        self.rules = list(rules)
        self.facts = facts or EnvironmentFacts()
        self.strategy = strategy or StrategyConfig()
        self.options = options or OrchestratorOptions()
        self.aggregates: dict[str, OrderAggregate] = {}
        self._locks: dict[str, threading.RLock] = {}
        self._guard = threading.Lock()
        # every dispatch's bindings, for the "never dispatched unbound" check
        self.violations: list[str] = []
        bus.declare(RESULTS_QUEUE)
        bus.declare(REQUEST_QUEUE)

    # -- plumbing -------------------------------------------------------------

    def lock_for(self, order_id: str) -> threading.RLock:
        with self._guard:
            return self._locks.setdefault(order_id, threading.RLock())

    def aggregate(self, order_id: str) -> OrderAggregate:
        agg = self.aggregates.get(order_id)
        if agg is None:
            agg = journal_replay(self.journal, order_id)
            self.aggregates[order_id] = agg
        return agg

    def _emit(self, agg: OrderAggregate, event: str, payload: dict[str, Any] | None = None) -> None:
        rec = self.journal.record(agg.order_id, event, payload or {}, self.clock.now())
        agg.apply(rec)

    # -- entry points -----------------------------------------------------------

    def handle_order(self, msg: Message) -> None:
        order = order_from_xml(msg.payload)
        with self.lock_for(order.order_id):
            try:
                agg = self.aggregate(order.order_id)
            except NotFound:
                # submitted straight to the queue without going through capture
                agg = OrderAggregate(order.order_id)
                self.aggregates[order.order_id] = agg
                self._emit(agg, "captured", {"order": order.to_dict()})
            self.advance(agg)

    def handle_result(self, msg: Message) -> None:
        result = result_from_xml(msg.payload)
        order_id, sid, attempt = parse_correlation(msg.correlation_id or "")
        with self.lock_for(order_id):
            agg = self.aggregate(order_id)
            self._on_result(agg, result, attempt)

    def advance(self, agg: OrderAggregate) -> None:
        """Drive an order as far as it can go without waiting on a reply."""
        if agg.state is OrderState.CAPTURED:
            self._validate_and_plan(agg)
        if agg.state is OrderState.VALIDATED:
            self._validate_and_plan(agg)
        if agg.state is OrderState.DECOMPOSED:
            self._emit(agg, "started")
        if agg.state is OrderState.IN_PROGRESS:
            self._pump(agg)
        if agg.state is OrderState.COMPENSATING:
            self._maybe_compensate(agg)

    # -- validation and planning ------------------------------------------------

    def _validate_and_plan(self, agg: OrderAggregate) -> None:
        order = agg.order
        assert order is not None
        if agg.state is OrderState.CAPTURED:
            result = validate_order(order, order.customer, self.rules, self.facts, self.catalog)
            failures = list(result.failures)
            plan = None
            if not failures:
                try:
                    subs = decompose(order, self.catalog)
                    plan = build_plan(subs, order_bindings(order))
                except (PlanError, UnknownProduct) as exc:
                    failures.append(("DECOMPOSITION", f"{type(exc).__name__}: {exc}"))
            self._emit(agg, "validated", {"passed": not failures, "failures": [list(f) for f in failures]})
            if failures:
                return
        else:
            plan = build_plan(decompose(order, self.catalog), order_bindings(order))
        self._emit(
            agg,
            "decomposed",
            {"suborders": [n.to_dict() for _, n in sorted(plan.nodes.items())], "bindings": dict(plan.bindings)},
        )

    # -- dispatch -------------------------------------------------------------------

    def _busy_targets(self, agg: OrderAggregate) -> set[str]:
        plan = agg.plan
        return {plan.nodes[s].target_id for s in agg.in_flight}

    def _pump(self, agg: OrderAggregate) -> None:
        plan = agg.plan
        if plan.all_done():
            self._emit(agg, "completed")
            return
        if self.options.parallel_dispatch:
            busy = self._busy_targets(agg)
            for node in ready_nodes(plan):
                if node.target_id not in busy:
                    busy.add(node.target_id)
                    self._dispatch(agg, node, 1)
        elif not agg.in_flight and not agg.waiting:
            ready = ready_nodes(plan)
            if ready:
                self._dispatch(agg, ready[0], 1)
        if not agg.in_flight and not agg.waiting and not ready_nodes(plan) and not plan.all_done():
            self._begin_compensation(agg, "plan stalled: no sub-order can be dispatched")

    def _dispatch(self, agg: OrderAggregate, node: SubOrder, attempt: int, delay: float = 0.0) -> None:
        plan = agg.plan
        sid = node.suborder_id
        unbound = plan.unbound(sid)
        if unbound:
            self.violations.append(f"{sid}: {unbound}")
            raise AssertionError(f"{sid} dispatched with unbound {unbound}")
        bindings = plan.required_bindings(sid)
        if sid not in agg.checkpoints:
            snap = self.registry.get(node.target_id).snapshot(node.customer_id)
            self._emit(agg, "checkpoint", {"suborder_id": sid, "snapshot": snap.to_dict()})
        self._emit(agg, "dispatched", {"suborder_id": sid, "attempt": attempt, "bindings": bindings})
        self.bus.send(
            REQUEST_QUEUE,
            dispatch_to_xml(plan.nodes[sid], attempt, bindings),
            correlation_id=correlation(agg.order_id, sid, attempt),
            reply_to=RESULTS_QUEUE,
            delay=delay,
        )

    def redispatch_in_flight(self, agg: OrderAggregate) -> None:
        """After a restart the bus is empty: resend every outstanding request."""
        for sid in agg.in_flight:
            attempt = agg.attempts[sid]
            node = agg.plan.nodes[sid]
            bindings = agg.plan.required_bindings(sid)
            self.bus.send(
                REQUEST_QUEUE,
                dispatch_to_xml(node, attempt, bindings),
                correlation_id=correlation(agg.order_id, sid, attempt),
                reply_to=RESULTS_QUEUE,
            )

    # -- results ----------------------------------------------------------------------

    def _on_result(self, agg: OrderAggregate, result: FulfillmentResult, attempt: int) -> None:
        plan = agg.plan
        sid = result.suborder_id
        if plan is None or sid not in plan.nodes or agg.state.terminal:
            return
        node = plan.nodes[sid]
        if attempt != agg.attempts.get(sid) or result.attempt != attempt:
            return  # reply to an earlier attempt
        if node.state is SubOrderState.WAITING_HUMAN and result.status is Status.PENDING_HUMAN:
            return  # duplicate
        if node.state not in (SubOrderState.DISPATCHED, SubOrderState.WAITING_HUMAN):
            return  # duplicate of a result already applied
        if result.status is Status.SUCCESS and binding_conflicts(plan, sid, result.provided_data):
            keys = ", ".join(binding_conflicts(plan, sid, result.provided_data))
            result = FulfillmentResult(
                sid, Status.FATAL_FAILURE, error=("BINDING_CONFLICT", keys), attempt=attempt, actions=result.actions
            )
        retry = (
            result.status is Status.RETRYABLE_FAILURE
            and attempt <= self.options.max_retries
            and agg.state is OrderState.IN_PROGRESS
        )
        self._emit(agg, "result", {"result": result.to_dict()})
        if result.status is Status.SUCCESS:
            self._record_undo(agg, sid, result)
        elif result.status is Status.PENDING_HUMAN:
            if result.task_id:
                self._emit(agg, "task_opened", {"suborder_id": sid, "task_id": result.task_id})
        elif retry:
            self._dispatch(agg, node, attempt + 1, delay=self.options.retry_delay)
            return
        elif agg.state is OrderState.IN_PROGRESS:
            code, message = result.error or ("", "")
            self._begin_compensation(agg, f"{sid} failed: {code} {message}".strip())
            return
        self.advance(agg)

    def _record_undo(self, agg: OrderAggregate, sid: str, result: FulfillmentResult, partial: bool = False) -> None:
        node = agg.plan.nodes[sid]
        strategy = entry_strategy(self.strategy, node.target_id, [a.verb for a in result.actions])
        entry = make_entry(
            agg.undo,
            node,
            result.actions,
            strategy,
            agg.checkpoints.get(sid),
            ancestors=agg.plan.ancestors(sid),
            recorded_at=self.clock.now(),
            partial=partial,
        )
        self._emit(agg, "undo_recorded", {"entry": entry.to_dict()})

    # -- compensation -------------------------------------------------------------------

    def _begin_compensation(self, agg: OrderAggregate, reason: str) -> None:
        self._emit(agg, "compensating", {"reason": reason})
        self._maybe_compensate(agg)

    def _maybe_compensate(self, agg: OrderAggregate) -> None:
        if agg.state is not OrderState.COMPENSATING or agg.in_flight:
            return  # wait for outstanding replies first
        plan = agg.plan
        for sid in plan.in_state(SubOrderState.FAILED, SubOrderState.WAITING_HUMAN):
            last = agg.last_results.get(sid)
            if last is not None and last.actions and agg.undo.for_suborder(sid) is None:
                self._record_undo(agg, sid, last, partial=True)
        for sid in plan.in_state(SubOrderState.WAITING_HUMAN):
            task = self.tasks.for_suborder(sid)
            if task is not None:
                self.tasks.cancel(task.task_id)
        report = compensate(
            agg.undo,
            self.registry,
            chooser=self.options.compensation_chooser,
            done=agg.compensated_entries(),
            on_step=lambda step: self._emit(agg, "compensation_step", {"step": step.to_dict()}),
            parallel=self.options.parallel_dispatch,
        )
        failed = [s for s in report.steps if not s.ok]
        if failed:
            self._emit(agg, "compensated", {"ok": False, "reason": f"compensation of {failed[0].suborder_id} failed: {failed[0].detail}"})
        else:
            self._emit(agg, "compensated", {"ok": True})

    # -- restart -------------------------------------------------------------------------

    def recover(self) -> list[str]:
        """Resume every non-terminal order found in the journal; returns their ids."""
        resumed = []
        for order_id in self.journal.order_ids():
            with self.lock_for(order_id):
                agg = self.aggregate(order_id)
                if agg.state.terminal:
                    continue
                resumed.append(order_id)
                try:
                    if agg.state in (OrderState.IN_PROGRESS, OrderState.COMPENSATING):
                        self.redispatch_in_flight(agg)
                    self.advance(agg)
                except OrderHubError as exc:
                    log.error("recovery of %s failed: %s", order_id, exc)
        return resumed
