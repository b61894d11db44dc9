"""Human task store: manual work represented as sub-orders waiting on a person."""

from __future__ import annotations

import json
import os
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ..errors import AlreadyDone, MissingOutputKeys, UnknownTask
from ..model import SubOrder
from .actions import FulfillmentResult, Status


@dataclass
class HumanTask:
    task_id: str
    suborder_id: str
    instructions: str
    required_output_keys: frozenset[str] = frozenset()
    state: str = "OPEN"  # OPEN | DONE | CANCELLED
    data: dict[str, str] = field(default_factory=dict)
    order_id: str = ""
    target_id: str = ""
    # what the fulfillment side needs to resume the sub-order later
    context: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["required_output_keys"] = sorted(self.required_output_keys)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "HumanTask":
        d = dict(d)
        d["required_output_keys"] = frozenset(d.get("required_output_keys", ()))
        return cls(**d)


class TaskStore:
    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._tasks: dict[str, HumanTask] = {}
        self._next = 1
        self._lock = threading.RLock()
        if self.path and self.path.exists():
            raw = json.loads(self.path.read_text(encoding="utf-8"))
            self._next = int(raw.get("next", 1))
            self._tasks = {t["task_id"]: HumanTask.from_dict(t) for t in raw.get("tasks", [])}

    def _save(self) -> None:
        if not self.path:
            return
        doc = {"next": self._next, "tasks": [t.to_dict() for t in self.all()]}
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, self.path)

    def all(self) -> list[HumanTask]:
        with self._lock:
            return sorted(self._tasks.values(), key=lambda t: int(t.task_id.split("-")[1]))

    def open_tasks(self) -> list[HumanTask]:
        return [t for t in self.all() if t.state == "OPEN"]

    def get(self, task_id: str) -> HumanTask:
        with self._lock:
            try:
                return self._tasks[task_id]
            except KeyError:
                raise UnknownTask(task_id) from None

    def for_suborder(self, suborder_id: str) -> HumanTask | None:
        with self._lock:
            for t in self._tasks.values():
                if t.suborder_id == suborder_id:
                    return t
            return None

    def create(self, suborder: SubOrder, instructions: str = "", context: Mapping[str, Any] | None = None) -> HumanTask:
        with self._lock:
            existing = self.for_suborder(suborder.suborder_id)
            if existing is not None:
                return existing
            task = HumanTask(
                task_id=f"T-{self._next}",
                suborder_id=suborder.suborder_id,
                instructions=instructions or f"complete {suborder.suborder_id}",
                required_output_keys=frozenset(suborder.provides_data),
                order_id=suborder.order_id,
                target_id=suborder.target_id,
                context=dict(context or {}),
            )
            self._next += 1
            self._tasks[task.task_id] = task
            self._save()
            return task

    def complete(self, task_id: str, data: Mapping[str, str]) -> FulfillmentResult:
        with self._lock:
            task = self.get(task_id)
            if task.state != "OPEN":
                raise AlreadyDone(f"{task_id} is {task.state}")
            missing = sorted(task.required_output_keys - set(data))
            if missing:
                raise MissingOutputKeys(f"{task_id} needs {', '.join(missing)}")
            task.state = "DONE"
            task.data = {k: str(v) for k, v in sorted(data.items())}
            self._save()
            return FulfillmentResult(
                task.suborder_id,
                Status.SUCCESS,
                {k: task.data[k] for k in sorted(task.required_output_keys)},
                attempt=int(task.context.get("attempt", 1)),
                task_id=task.task_id,
            )

    def refresh(self, task_id: str, context: Mapping[str, Any]) -> HumanTask:
        """Point an open task at a newer attempt, so its completion is not taken as stale."""
        with self._lock:
            task = self.get(task_id)
            if task.state == "OPEN" and int(context.get("attempt", 1)) > int(task.context.get("attempt", 1)):
                task.context = dict(context)
                self._save()
            return task

    def cancel(self, task_id: str) -> None:
        with self._lock:
            task = self.get(task_id)
            if task.state == "OPEN":
                task.state = "CANCELLED"
                self._save()


def create_task(store: TaskStore, suborder: SubOrder, instructions: str = "") -> HumanTask:
    return store.create(suborder, instructions)


def complete_task(store: TaskStore, task_id: str, data: Mapping[str, str]) -> FulfillmentResult:
    return store.complete(task_id, data)
