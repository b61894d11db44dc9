"""Fulfillment front: turns dispatched sub-orders into actions on target adapters."""

from __future__ import annotations

import logging
from dataclasses import replace
from typing import Mapping

from ..errors import UnknownTarget, UnsupportedItem
from ..model import SubOrder
from ..msgbus import Message, MessageBus
from ..wire import dispatch_from_xml, dispatch_to_xml, result_to_xml
from .actions import Action, FulfillmentResult, Status
from .platforms import TargetRegistry
from .tasks import TaskStore

log = logging.getLogger(__name__)

REQUEST_QUEUE = "fulfillment.requests"


def translate(suborder: SubOrder, adapter, bindings: Mapping[str, str] | None = None) -> list[Action]:
    return adapter.translate(suborder, bindings)


def execute(
    adapter,
    actions: list[Action],
    suborder: SubOrder,
    attempt: int = 1,
    task_data: Mapping[str, str] | None = None,
) -> FulfillmentResult:
    """Run ``actions`` in order, stopping at the first failure.

    A manual action without a recorded outcome pauses the list with
    PENDING_HUMAN unless ``task_data`` (what the human reported) is given.
    Errors are reported in the result, never raised.
    """
    sid = suborder.suborder_id
    applied: list[Action] = []
    produced: dict[str, str] = {}
    for action in actions:
        if action.verb in adapter.manual_verbs and not adapter.has_outcome(action.idempotency_key):
            if task_data is None:
                return FulfillmentResult(sid, Status.PENDING_HUMAN, attempt=attempt, actions=tuple(applied))
            action = replace(action, params={**action.params, **{f"task.{k}": v for k, v in task_data.items()}})
        outcome = adapter.execute_action(action)
        if not outcome.ok:
            status = Status.RETRYABLE_FAILURE if outcome.kind == "RETRYABLE" else Status.FATAL_FAILURE
            return FulfillmentResult(
                sid, status, error=(outcome.code, outcome.message), attempt=attempt, actions=tuple(applied)
            )
        applied.append(action)
        produced.update(outcome.data)
    missing = sorted(suborder.provides_data - produced.keys())
    if missing:
        return FulfillmentResult(
            sid,
            Status.FATAL_FAILURE,
            error=("MISSING_DATA", f"{adapter.target_id} did not produce {', '.join(missing)}"),
            attempt=attempt,
            actions=tuple(applied),
        )
    provided = {k: produced[k] for k in sorted(suborder.provides_data)}
    return FulfillmentResult(sid, Status.SUCCESS, provided, attempt=attempt, actions=tuple(applied))


class FulfillmentService:
    """Consumes ``fulfillment.requests`` and replies with results.

    There is no message-id dedup here on purpose: redelivered requests are
    absorbed by per-action idempotency on the adapters.
    """

    def __init__(self, registry: TargetRegistry, tasks: TaskStore, bus: MessageBus):
        self.registry = registry
        self.tasks = tasks
        self.bus = bus
        bus.declare(REQUEST_QUEUE)

    def handle(self, msg: Message) -> FulfillmentResult:
        sub, attempt, bindings = dispatch_from_xml(msg.payload)
        result = self.fulfil(sub, attempt, bindings, reply_to=msg.reply_to, correlation_id=msg.correlation_id)
        if msg.reply_to:
            self.bus.send(msg.reply_to, result_to_xml(result), correlation_id=msg.correlation_id)
        return result

    def fulfil(
        self,
        sub: SubOrder,
        attempt: int,
        bindings: Mapping[str, str],
        *,
        reply_to: str | None = None,
        correlation_id: str | None = None,
        task_data: Mapping[str, str] | None = None,
    ) -> FulfillmentResult:
        try:
            adapter = self.registry.get(sub.target_id)
            actions = adapter.translate(sub, bindings)
        except (UnknownTarget, UnsupportedItem) as exc:
            return FulfillmentResult(sub.suborder_id, Status.FATAL_FAILURE, error=(type(exc).__name__, str(exc)), attempt=attempt)
        result = execute(adapter, actions, sub, attempt, task_data)
        if result.status is Status.PENDING_HUMAN:
            context = {
                "request": dispatch_to_xml(sub, attempt, bindings),
                "reply_to": reply_to,
                "correlation_id": correlation_id,
                "attempt": attempt,
            }
            task = self.tasks.create(sub, adapter.task_instructions(sub), context)
            task = self.tasks.refresh(task.task_id, context)
            if task.state == "DONE":
                # redelivered request for work a human already finished
                result = execute(adapter, actions, sub, attempt, task.data)
            result = replace(result, task_id=task.task_id)
        return result

    def complete_task(self, task_id: str, data: Mapping[str, str]) -> FulfillmentResult:
        task = self.tasks.get(task_id)
        self.tasks.complete(task_id, data)
        task = self.tasks.get(task_id)
        sub, attempt, bindings = dispatch_from_xml(task.context["request"])
        result = self.fulfil(sub, attempt, bindings, task_data=task.data)
        result = replace(result, task_id=task_id)
        reply_to = task.context.get("reply_to")
        if reply_to:
            self.bus.declare(reply_to)
            self.bus.send(reply_to, result_to_xml(result), correlation_id=task.context.get("correlation_id"))
        return result
