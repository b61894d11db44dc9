"""In-process message bus with at-least-once delivery.

Named queues, visibility timeouts, redelivery with a delivery counter,
dead-letter queues (``<queue>.dead``) and request/reply over correlation
ids. Time for visibility and delayed delivery comes from an injected clock
so tests can drive timeouts deterministically. FIFO order within a queue is
not promised.
"""

from __future__ import annotations

import itertools
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from typing import Any, Callable

from .errors import BusUnavailable, Empty, NotInFlight, RequestTimeout, UnknownQueue


class WallClock:
    def now(self) -> float:
        return time.time()


class SimClock:
    """Manually advanced clock. Thread-safe."""

    def __init__(self, start: float = 0.0):
        self._t = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._t

    def advance(self, dt: float) -> float:
        with self._lock:
            self._t += dt
            return self._t

    def advance_to(self, t: float) -> float:
        with self._lock:
            self._t = max(self._t, t)
            return self._t


@dataclass(frozen=True)
class QueueConfig:
    name: str
    visibility_timeout: float = 30.0
    max_redeliveries: int = 5

    def __post_init__(self):
        if self.visibility_timeout <= 0:
            raise ValueError("visibility_timeout must be > 0")


@dataclass(frozen=True)
class Message:
    message_id: str
    queue: str
    payload: Any
    correlation_id: str | None = None
    reply_to: str | None = None
    delivery_count: int = 0
    enqueued_at: float = 0.0
    receipt: str | None = field(default=None, compare=False)


@dataclass
class _Stored:
    message: Message
    visible_at: float
    seq: int
    receipt: str | None = None
    deadline: float = 0.0


class _Queue:
    def __init__(self, config: QueueConfig):
        self.config = config
        self.ready: list[_Stored] = []
        self.inflight: dict[str, _Stored] = {}


class MessageBus:
    def __init__(
        self,
        clock=None,
        *,
        visibility_timeout: float = 30.0,
        max_redeliveries: int = 5,
        duplicate_deliveries: bool = False,
        id_prefix: str = "M",
    ):
        self.clock = clock or WallClock()
        self.default_visibility = visibility_timeout
        self.default_max_redeliveries = max_redeliveries
        self.duplicate_deliveries = duplicate_deliveries
        self.available = True
        self._queues: dict[str, _Queue] = {}
        self._ids = itertools.count(1)
        self._seq = itertools.count(1)
        self._prefix = id_prefix
        self._cond = threading.Condition(threading.RLock())
        self.sent_count = 0

    # -- administration ----------------------------------------------------

    def declare(self, name: str, visibility_timeout: float | None = None, max_redeliveries: int | None = None) -> QueueConfig:
        with self._cond:
            if name in self._queues:
                return self._queues[name].config
            cfg = QueueConfig(
                name,
                self.default_visibility if visibility_timeout is None else visibility_timeout,
                self.default_max_redeliveries if max_redeliveries is None else max_redeliveries,
            )
            self._queues[name] = _Queue(cfg)
            if not name.endswith(".dead"):
                self.declare(name + ".dead", cfg.visibility_timeout, cfg.max_redeliveries)
            return cfg

    def queues(self) -> list[str]:
        with self._cond:
            return sorted(self._queues)

    def _queue(self, name: str) -> _Queue:
        try:
            return self._queues[name]
        except KeyError:
            raise UnknownQueue(name) from None

    def ensure_available(self) -> None:
        if not self.available:
            raise BusUnavailable("message bus is down")

    # -- core operations ---------------------------------------------------

    def send(
        self,
        queue: str,
        payload: Any,
        correlation_id: str | None = None,
        reply_to: str | None = None,
        delay: float = 0.0,
    ) -> str:
        self.ensure_available()
        with self._cond:
            q = self._queue(queue)
            now = self.clock.now()
            msg = Message(f"{self._prefix}-{next(self._ids)}", queue, payload, correlation_id, reply_to, 0, now)
            copies = 2 if self.duplicate_deliveries else 1
            for _ in range(copies):
                q.ready.append(_Stored(msg, now + delay, next(self._seq)))
            self.sent_count += 1
            self._cond.notify_all()
            return msg.message_id

    def _sweep(self, q: _Queue, now: float) -> None:
        for receipt, st in list(q.inflight.items()):
            if st.deadline > now:
                continue
            del q.inflight[receipt]
            st.receipt = None
            if st.message.delivery_count > q.config.max_redeliveries:
                dead = self._queues[q.config.name + ".dead"]
                moved = replace(st.message, queue=dead.config.name, receipt=None)
                dead.ready.append(_Stored(moved, now, next(self._seq)))
            else:
                st.visible_at = now
                q.ready.append(st)

    def _take(self, q: _Queue, selector: Callable[[Message], bool] | None) -> Message | None:
        now = self.clock.now()
        self._sweep(q, now)
        candidates = [s for s in q.ready if s.visible_at <= now and (selector is None or selector(s.message))]
        if not candidates:
            return None
        st = min(candidates, key=lambda s: (s.visible_at, s.seq))
        q.ready.remove(st)
        st.receipt = uuid.uuid4().hex
        st.deadline = now + q.config.visibility_timeout
        st.message = replace(st.message, delivery_count=st.message.delivery_count + 1)
        q.inflight[st.receipt] = st
        return replace(st.message, receipt=st.receipt)

    def try_receive(self, queue: str, selector: Callable[[Message], bool] | None = None) -> Message | None:
        with self._cond:
            return self._take(self._queue(queue), selector)

    def receive(
        self, queue: str, timeout: float | None = None, selector: Callable[[Message], bool] | None = None
    ) -> Message:
        """Take one visible message. Raises Empty if none arrives within ``timeout`` (real seconds)."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            q = self._queue(queue)
            while True:
                msg = self._take(q, selector)
                if msg is not None:
                    return msg
                if deadline is None:
                    raise Empty(queue)
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise Empty(queue)
                self._cond.wait(min(remaining, 0.05))

    def ack(self, message: Message) -> None:
        with self._cond:
            q = self._queue(message.queue)
            self._sweep(q, self.clock.now())
            if message.receipt is None or message.receipt not in q.inflight:
                raise NotInFlight(message.message_id)
            del q.inflight[message.receipt]

    def release(self, message: Message) -> None:
        """Negative ack: make an in-flight message visible again right away."""
        with self._cond:
            q = self._queue(message.queue)
            st = q.inflight.pop(message.receipt or "", None)
            if st is None:
                raise NotInFlight(message.message_id)
            st.receipt = None
            st.visible_at = self.clock.now()
            q.ready.append(st)
            self._cond.notify_all()

    def request(self, queue: str, payload: Any, timeout: float = 5.0, reply_to: str | None = None) -> Any:
        """Synchronous call over the asynchronous primitives.

        Replies land on a shared reply queue; only the one whose
        correlation id matches this request is taken.
        """
        reply_queue = reply_to or queue + ".replies"
        self.declare(reply_queue)
        correlation = uuid.uuid4().hex
        self.send(queue, payload, correlation_id=correlation, reply_to=reply_queue)
        try:
            reply = self.receive(reply_queue, timeout=timeout, selector=lambda m: m.correlation_id == correlation)
        except Empty:
            raise RequestTimeout(f"no reply on {reply_queue} within {timeout}s") from None
        self.ack(reply)
        return reply.payload

    # -- inspection --------------------------------------------------------

    def depth(self, queue: str) -> int:
        with self._cond:
            q = self._queue(queue)
            self._sweep(q, self.clock.now())
            return len(q.ready)

    def inflight(self, queue: str) -> int:
        with self._cond:
            return len(self._queue(queue).inflight)

    def peek(self, queue: str) -> list[Message]:
        with self._cond:
            q = self._queue(queue)
            return [s.message for s in sorted(q.ready, key=lambda s: s.seq)]

    def next_visible_at(self, queues: list[str] | None = None) -> float | None:
        """Earliest time at which some message (optionally on ``queues``) becomes receivable."""
        with self._cond:
            times = []
            for name, q in self._queues.items():
                if queues is not None and name not in queues:
                    continue
                times.extend(s.visible_at for s in q.ready)
                times.extend(s.deadline for s in q.inflight.values())
            return min(times) if times else None

    def idle(self, queues: list[str]) -> bool:
        with self._cond:
            return all(not self._queues[n].ready and not self._queues[n].inflight for n in queues)
