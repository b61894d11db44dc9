from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Mapping


class Verb(str, enum.Enum):
    COMMIT_ADDRESS = "COMMIT_ADDRESS"
    CREATE_SUBSCRIPTION = "CREATE_SUBSCRIPTION"
    CANCEL_SUBSCRIPTION = "CANCEL_SUBSCRIPTION"
    INSTALL_CPE = "INSTALL_CPE"
    REMOVE_CPE = "REMOVE_CPE"
    SCHEDULE_VISIT = "SCHEDULE_VISIT"
    CANCEL_VISIT = "CANCEL_VISIT"
    PROVISION_BILLING = "PROVISION_BILLING"
    DEPROVISION_BILLING = "DEPROVISION_BILLING"
    COMPLETE_TASK = "COMPLETE_TASK"


class Status(str, enum.Enum):
    SUCCESS = "SUCCESS"
    RETRYABLE_FAILURE = "RETRYABLE_FAILURE"
    FATAL_FAILURE = "FATAL_FAILURE"
    PENDING_HUMAN = "PENDING_HUMAN"

    @property
    def failed(self) -> bool:
        return self in (Status.RETRYABLE_FAILURE, Status.FATAL_FAILURE)


def idempotency_key(order_id: str, suborder_id: str, action_idx: int) -> str:
    return f"{order_id}:{suborder_id}:{action_idx}"


@dataclass(frozen=True)
class Action:
    action_idx: int
    verb: Verb
    params: Mapping[str, str] = field(default_factory=dict)
    idempotency_key: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "action_idx": self.action_idx,
            "verb": self.verb.value,
            "params": dict(sorted(self.params.items())),
            "idempotency_key": self.idempotency_key,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Action":
        return cls(int(d["action_idx"]), Verb(d["verb"]), dict(d.get("params", {})), str(d["idempotency_key"]))


@dataclass(frozen=True)
class Outcome:
    """Per-action result recorded in a target's idempotency store."""

    ok: bool
    data: Mapping[str, str] = field(default_factory=dict)
    kind: str = ""  # RETRYABLE / FATAL when not ok
    code: str = ""
    message: str = ""


@dataclass(frozen=True)
class FulfillmentResult:
    suborder_id: str
    status: Status
    provided_data: Mapping[str, str] = field(default_factory=dict)
    error: tuple[str, str] | None = None
    attempt: int = 1
    # actions that took effect on the platform, in execution order
    actions: tuple[Action, ...] = ()
    task_id: str | None = None

    def __post_init__(self):
        if self.provided_data and self.status is not Status.SUCCESS:
            raise ValueError("provided_data is only allowed on SUCCESS")
        if (self.error is not None) != self.status.failed:
            raise ValueError("error must be present iff the status is a failure")

    def to_dict(self) -> dict[str, Any]:
        return {
            "suborder_id": self.suborder_id,
            "status": self.status.value,
            "provided_data": dict(sorted(self.provided_data.items())),
            "error": list(self.error) if self.error else None,
            "attempt": self.attempt,
            "actions": [a.to_dict() for a in self.actions],
            "task_id": self.task_id,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FulfillmentResult":
        err = d.get("error")
        return cls(
            suborder_id=str(d["suborder_id"]),
            status=Status(d["status"]),
            provided_data=dict(d.get("provided_data") or {}),
            error=(str(err[0]), str(err[1])) if err else None,
            attempt=int(d.get("attempt", 1)),
            actions=tuple(Action.from_dict(a) for a in d.get("actions", ())),
            task_id=d.get("task_id"),
        )
