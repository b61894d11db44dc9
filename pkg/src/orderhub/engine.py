"""Wires capture, the order manager and fulfillment together over one bus."""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .aggregate import OrderAggregate, journal_replay
from .capture import MANAGEMENT_QUEUE, CaptureService
from .catalog import Catalog
from .compensation import StrategyConfig, UndoEntry, latest_first
from .fulfillment.actions import FulfillmentResult
from .fulfillment.platforms import TargetRegistry
from .fulfillment.service import REQUEST_QUEUE, FulfillmentService
from .fulfillment.tasks import TaskStore
from .journal import Journal
from .management.orchestrator import RESULTS_QUEUE, Orchestrator, OrchestratorOptions
from .management.rules import EnvironmentFacts, ValidationRule
from .model import CanonicalOrder
from .msgbus import Message, MessageBus, SimClock

log = logging.getLogger(__name__)

# results first so in-flight work settles before new work starts
QUEUES = (RESULTS_QUEUE, REQUEST_QUEUE, MANAGEMENT_QUEUE)


@dataclass(frozen=True)
class EngineOptions:
    max_retries: int = 3
    retry_delay: float = 5.0
    parallel_dispatch: bool = False
    duplicate_deliveries: bool = False
    visibility_timeout: float = 30.0
    max_redeliveries: int = 5

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> "EngineOptions":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown options {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class Engine:
    def __init__(
        self,
        catalog: Catalog,
        registry: TargetRegistry,
        *,
        rules: Sequence[ValidationRule] = (),
        facts: EnvironmentFacts | None = None,
        strategy: StrategyConfig | None = None,
        options: EngineOptions | None = None,
        journal: Journal | None = None,
        tasks: TaskStore | None = None,
        clock=None,
        seed: int = 0,
        chooser: Callable[[list[UndoEntry]], UndoEntry] = latest_first,
        auto_complete: Mapping[str, str] | None = None,
    ):
        self.options = options or EngineOptions()
        self.clock = clock or SimClock()
        self.bus = MessageBus(
            self.clock,
            visibility_timeout=self.options.visibility_timeout,
            max_redeliveries=self.options.max_redeliveries,
            duplicate_deliveries=self.options.duplicate_deliveries,
        )
        self.catalog = catalog
        self.registry = registry
        self.journal = journal if journal is not None else Journal()
        self.tasks = tasks if tasks is not None else TaskStore()
        self.capture = CaptureService(self.bus, self.journal, self.clock, seed=seed)
        self.fulfillment = FulfillmentService(registry, self.tasks, self.bus)
        self.orchestrator = Orchestrator(
            bus=self.bus,
            journal=self.journal,
            catalog=catalog,
            registry=registry,
            tasks=self.tasks,
            rules=rules,
            facts=facts,
            strategy=strategy,
            options=OrchestratorOptions(
                max_retries=self.options.max_retries,
                retry_delay=self.options.retry_delay,
                parallel_dispatch=self.options.parallel_dispatch,
                compensation_chooser=chooser,
            ),
        )
        self.auto_complete = dict(auto_complete) if auto_complete is not None else None
        self.handler_errors: list[str] = []
        self.dead_letters: dict[str, list[Message]] = {}

    # -- input ------------------------------------------------------------------

    def submit(self, channel_id: str, data: bytes) -> str:
        return self.capture.submit(self.capture.parse(channel_id, data))

    def submit_order(self, order: CanonicalOrder) -> str:
        return self.capture.submit(order)

    def complete_task(self, task_id: str, data: Mapping[str, str]) -> FulfillmentResult:
        return self.fulfillment.complete_task(task_id, data)

    # -- message pump -------------------------------------------------------------

    def _take(self) -> Message | None:
        for queue in QUEUES:
            msg = self.bus.try_receive(queue)
            if msg is not None:
                return msg
        return None

    def _handle(self, msg: Message) -> None:
        try:
            if msg.queue == MANAGEMENT_QUEUE:
                self.orchestrator.handle_order(msg)
            elif msg.queue == REQUEST_QUEUE:
                self.fulfillment.handle(msg)
            else:
                self.orchestrator.handle_result(msg)
        except Exception as exc:
            # left unacked: redelivered after the visibility timeout, then dead-lettered
            log.exception("handler for %s failed", msg.queue)
            self.handler_errors.append(f"{msg.queue} {msg.message_id}: {type(exc).__name__}: {exc}")
            return
        self.bus.ack(msg)

    def _advance_clock(self) -> bool:
        t = self.bus.next_visible_at(list(QUEUES))
        if t is None:
            return False
        now = self.clock.now()
        if t <= now:
            return False
        if hasattr(self.clock, "advance_to"):
            self.clock.advance_to(t)
        else:
            time.sleep(t - now)
        return True

    def step(self) -> bool:
        """Handle one message; False when nothing is receivable right now."""
        msg = self._take()
        if msg is None:
            return False
        self._handle(msg)
        return True

    def _drain(self, workers: int) -> None:
        if workers <= 1:
            while True:
                if self.step():
                    continue
                if not self._advance_clock():
                    return
        cond = threading.Condition()
        active = [0]

        def worker():
            while True:
                with cond:
                    msg = self._take()
                    if msg is None:
                        if active[0] == 0:
                            if self._advance_clock():
                                continue
                            cond.notify_all()
                            return
                        cond.wait(0.01)
                        continue
                    active[0] += 1
                try:
                    self._handle(msg)
                finally:
                    with cond:
                        active[0] -= 1
                        cond.notify_all()

        threads = [threading.Thread(target=worker, name=f"worker-{i}") for i in range(workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    def run_until_idle(self, workers: int = 1) -> None:
        while True:
            self._drain(workers)
            if self.auto_complete is None:
                break
            pending = self.tasks.open_tasks()
            if not pending:
                break
            for task in pending:
                data = {k: v for k, v in self.auto_complete.items() if k in task.required_output_keys}
                self.complete_task(task.task_id, data)
        self._collect_dead()

    def _collect_dead(self) -> None:
        for queue in QUEUES:
            dead = queue + ".dead"
            while (msg := self.bus.try_receive(dead)) is not None:
                self.bus.ack(msg)
                self.dead_letters.setdefault(queue, []).append(msg)

    # -- restart --------------------------------------------------------------------

    def recover(self) -> list[str]:
        return self.orchestrator.recover()

    # -- inspection -------------------------------------------------------------------

    def status(self, order_id: str) -> OrderAggregate:
        agg = self.orchestrator.aggregates.get(order_id)
        return agg if agg is not None else journal_replay(self.journal, order_id)

    def dumps(self) -> dict[str, bytes]:
        return self.registry.dumps()


def write_dead_letters(engine: Engine, directory: str | Path) -> None:
    directory = Path(directory)
    for queue, msgs in engine.dead_letters.items():
        if not msgs:
            continue
        directory.mkdir(parents=True, exist_ok=True)
        with (directory / f"{queue}.jsonl").open("a", encoding="utf-8") as fh:
            for m in msgs:
                fh.write(json.dumps(dead_letter_dict(m), sort_keys=True) + "\n")
        msgs.clear()


def dead_letter_dict(m: Message) -> dict[str, Any]:
    return {
        "message_id": m.message_id,
        "queue": m.queue,
        "payload": m.payload,
        "correlation_id": m.correlation_id,
        "reply_to": m.reply_to,
        "delivery_count": m.delivery_count,
        "enqueued_at": m.enqueued_at,
    }
