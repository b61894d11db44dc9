"""Canonical order model and the order/sub-order state machines."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from decimal import Decimal
from typing import Any, Mapping

from .errors import IllegalTransition

CHANNELS = ("POS", "WEB", "IVR", "CSR", "B2B")


class OrderState(str, enum.Enum):
    CAPTURED = "CAPTURED"
    REJECTED = "REJECTED"
    VALIDATED = "VALIDATED"
    DECOMPOSED = "DECOMPOSED"
    IN_PROGRESS = "IN_PROGRESS"
    COMPLETED = "COMPLETED"
    COMPENSATING = "COMPENSATING"
    COMPENSATED = "COMPENSATED"
    FAILED = "FAILED"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL_STATES


TERMINAL_STATES = frozenset(
    {OrderState.REJECTED, OrderState.COMPLETED, OrderState.COMPENSATED, OrderState.FAILED}
)


class OrderEvent(str, enum.Enum):
    VALIDATION_PASSED = "ValidationPassed"
    VALIDATION_FAILED = "ValidationFailed"
    DECOMPOSED = "Decomposed"
    FULFILLMENT_STARTED = "FulfillmentStarted"
    ALL_DONE = "AllDone"
    FATAL_FULFILLMENT_FAILURE = "FatalFulfillmentFailure"
    COMPENSATION_SUCCEEDED = "CompensationSucceeded"
    COMPENSATION_FAILED = "CompensationFailed"


_TRANSITIONS: dict[tuple[OrderState, OrderEvent], OrderState] = {
    (OrderState.CAPTURED, OrderEvent.VALIDATION_PASSED): OrderState.VALIDATED,
    (OrderState.CAPTURED, OrderEvent.VALIDATION_FAILED): OrderState.REJECTED,
    (OrderState.VALIDATED, OrderEvent.DECOMPOSED): OrderState.DECOMPOSED,
    (OrderState.DECOMPOSED, OrderEvent.FULFILLMENT_STARTED): OrderState.IN_PROGRESS,
    (OrderState.IN_PROGRESS, OrderEvent.ALL_DONE): OrderState.COMPLETED,
    (OrderState.IN_PROGRESS, OrderEvent.FATAL_FULFILLMENT_FAILURE): OrderState.COMPENSATING,
    (OrderState.COMPENSATING, OrderEvent.COMPENSATION_SUCCEEDED): OrderState.COMPENSATED,
    (OrderState.COMPENSATING, OrderEvent.COMPENSATION_FAILED): OrderState.FAILED,
}


def transition(state: OrderState | str, event: OrderEvent | str) -> OrderState:
    state, event = OrderState(state), OrderEvent(event)
    try:
        return _TRANSITIONS[(state, event)]
    except KeyError:
        raise IllegalTransition(f"{event.value} not allowed in {state.value}") from None


def transition_table() -> dict[tuple[OrderState, OrderEvent], OrderState]:
    return dict(_TRANSITIONS)


class SubOrderState(str, enum.Enum):
    PENDING = "PENDING"
    READY = "READY"
    DISPATCHED = "DISPATCHED"
    WAITING_HUMAN = "WAITING_HUMAN"
    DONE = "DONE"
    FAILED = "FAILED"
    COMPENSATED = "COMPENSATED"


class SubOrderKind(str, enum.Enum):
    SERVICE = "SERVICE"
    BILLING = "BILLING"
    WORK_ORDER = "WORK_ORDER"
    HUMAN_TASK = "HUMAN_TASK"


@dataclass(frozen=True)
class CustomerRef:
    customer_id: str
    credit_limit: Decimal = Decimal(0)
    premises_address: str = ""
    cpe_capabilities: frozenset[str] = frozenset()
    contract_terms: frozenset[str] = frozenset()

    def to_dict(self) -> dict[str, Any]:
        return {
            "customer_id": self.customer_id,
            "credit_limit": str(self.credit_limit),
            "premises_address": self.premises_address,
            "cpe_capabilities": sorted(self.cpe_capabilities),
            "contract_terms": sorted(self.contract_terms),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CustomerRef":
        return cls(
            customer_id=str(d["customer_id"]),
            credit_limit=Decimal(str(d.get("credit_limit", "0"))),
            premises_address=str(d.get("premises_address", "")),
            cpe_capabilities=frozenset(d.get("cpe_capabilities", ())),
            contract_terms=frozenset(d.get("contract_terms", ())),
        )


@dataclass(frozen=True)
class OrderLine:
    line_id: str
    product_code: str
    qty: int = 1
    params: Mapping[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "line_id": self.line_id,
            "product_code": self.product_code,
            "qty": self.qty,
            "params": dict(sorted(self.params.items())),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "OrderLine":
        return cls(str(d["line_id"]), str(d["product_code"]), int(d["qty"]), dict(d.get("params", {})))


@dataclass(frozen=True)
class CanonicalOrder:
    order_id: str
    channel_id: str
    customer: CustomerRef
    lines: tuple[OrderLine, ...]
    created_at: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "order_id": self.order_id,
            "channel_id": self.channel_id,
            "customer": self.customer.to_dict(),
            "lines": [ln.to_dict() for ln in self.lines],
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CanonicalOrder":
        return cls(
            order_id=str(d["order_id"]),
            channel_id=str(d["channel_id"]),
            customer=CustomerRef.from_dict(d["customer"]),
            lines=tuple(OrderLine.from_dict(ln) for ln in d["lines"]),
            created_at=float(d.get("created_at", 0.0)),
        )

    def content(self) -> "CanonicalOrder":
        """The order with channel-assigned identity blanked; equal across channels."""
        return replace(self, order_id="", channel_id="", created_at=0.0)

    def line(self, line_id: str) -> OrderLine:
        for ln in self.lines:
            if ln.line_id == line_id:
                return ln
        raise KeyError(line_id)


@dataclass(frozen=True)
class Item:
    service_code: str
    params: Mapping[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"service_code": self.service_code, "params": dict(sorted(self.params.items()))}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Item":
        return cls(str(d["service_code"]), dict(d.get("params", {})))


@dataclass
class SubOrder:
    suborder_id: str
    order_id: str
    line_id: str | None
    target_id: str
    kind: SubOrderKind
    customer_id: str = ""
    items: tuple[Item, ...] = ()
    requires_data: frozenset[str] = frozenset()
    provides_data: frozenset[str] = frozenset()
    depends_on: frozenset[str] = frozenset()
    state: SubOrderState = SubOrderState.PENDING

    def to_dict(self) -> dict[str, Any]:
        return {
            "suborder_id": self.suborder_id,
            "order_id": self.order_id,
            "line_id": self.line_id,
            "target_id": self.target_id,
            "kind": self.kind.value,
            "customer_id": self.customer_id,
            "items": [i.to_dict() for i in self.items],
            "requires_data": sorted(self.requires_data),
            "provides_data": sorted(self.provides_data),
            "depends_on": sorted(self.depends_on),
            "state": self.state.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SubOrder":
        return cls(
            suborder_id=str(d["suborder_id"]),
            order_id=str(d["order_id"]),
            line_id=d.get("line_id"),
            target_id=str(d["target_id"]),
            kind=SubOrderKind(d["kind"]),
            customer_id=str(d.get("customer_id", "")),
            items=tuple(Item.from_dict(i) for i in d.get("items", ())),
            requires_data=frozenset(d.get("requires_data", ())),
            provides_data=frozenset(d.get("provides_data", ())),
            depends_on=frozenset(d.get("depends_on", ())),
            state=SubOrderState(d.get("state", "PENDING")),
        )


def qualify(line_id: str | None, key: str) -> str:
    """Binding names are scoped per order line so repeated products don't collide."""
    return f"{line_id or '*'}/{key}"


def order_bindings(order: CanonicalOrder) -> dict[str, str]:
    """Initial plan bindings: every line parameter, line-qualified."""
    out: dict[str, str] = {}
    for ln in order.lines:
        for k, v in ln.params.items():
            out[qualify(ln.line_id, k)] = str(v)
    return out
