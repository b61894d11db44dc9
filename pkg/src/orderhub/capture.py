"""Order capture: channel documents in, canonical orders out.

Each channel adapter is only a "view" that turns its own document format
into canonical order fields. Identity assignment, the structural gate and
submission to the management queue are shared by every channel.
"""

from __future__ import annotations

import json
import random
import re
import threading
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from typing import Any, Callable, Mapping

from .errors import BadEnvelope, DuplicateOrder, InvalidOrder, MalformedDocument, UnknownChannel
from .findings import ValidationReport
from .fulfillment.b2b import b2b_unwrap
from .journal import Journal
from .model import CHANNELS, CanonicalOrder, CustomerRef, OrderLine
from .msgbus import MessageBus
from .wire import order_to_xml

MANAGEMENT_QUEUE = "orders.management"


@dataclass(frozen=True)
class RawChannelDocument:
    channel_id: str
    data: bytes


@dataclass(frozen=True)
class ChannelAdapter:
    channel_id: str
    # raw bytes -> (customer, lines)
    parser: Callable[[bytes], tuple[CustomerRef, tuple[OrderLine, ...]]]


def _decode(data: bytes) -> str:
    if not data or not data.strip():
        raise MalformedDocument("empty document", 1, 1)
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedDocument(f"not UTF-8: {exc}") from None


def _tags(text: str) -> frozenset[str]:
    return frozenset(t.strip() for t in text.split(",") if t.strip())


def _decimal(text: Any, line: int | None = None) -> Decimal:
    try:
        return Decimal(str(text))
    except InvalidOperation:
        raise MalformedDocument(f"not a number: {text!r}", line) from None


def _int(text: Any, line: int | None = None) -> int:
    try:
        return int(str(text))
    except ValueError:
        raise MalformedDocument(f"not an integer: {text!r}", line) from None


# -- POS: key=value lines -----------------------------------------------------

_LINE_KEY = re.compile(r"^line\.(\d+)\.(id|product|qty|param\.(.+))$")


def parse_pos(data: bytes) -> tuple[CustomerRef, tuple[OrderLine, ...]]:
    text = _decode(data)
    values: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise MalformedDocument(f"expected key=value, got {stripped!r}", lineno, 1)
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in values:
            raise MalformedDocument(f"duplicate key {key!r}", lineno, 1)
        values[key] = (value.strip(), lineno)

    customer: dict[str, Any] = {}
    lines: dict[int, dict[str, Any]] = {}
    for key, (value, lineno) in values.items():
        if key == "channel":
            continue
        if key.startswith("customer."):
            field_name = key[len("customer."):]
            if field_name == "id":
                customer["customer_id"] = value
            elif field_name == "credit_limit":
                customer["credit_limit"] = _decimal(value, lineno)
            elif field_name == "address":
                customer["premises_address"] = value
            elif field_name == "cpe":
                customer["cpe_capabilities"] = _tags(value)
            elif field_name == "contract":
                customer["contract_terms"] = _tags(value)
            else:
                raise MalformedDocument(f"unknown customer field {key!r}", lineno, 1)
            continue
        m = _LINE_KEY.match(key)
        if not m:
            raise MalformedDocument(f"unknown key {key!r}", lineno, 1)
        group = lines.setdefault(int(m.group(1)), {"params": {}, "lineno": lineno})
        if m.group(3) is not None:
            group["params"][m.group(3)] = value
        elif m.group(2) == "qty":
            group["qty"] = _int(value, lineno)
        else:
            group[m.group(2)] = value

    if "customer_id" not in customer:
        raise MalformedDocument("missing customer.id")
    out = []
    for n in sorted(lines):
        g = lines[n]
        if "product" not in g:
            raise MalformedDocument(f"line.{n} has no product", g["lineno"])
        out.append(OrderLine(g.get("id", f"L{n}"), g["product"], g.get("qty", 1), dict(sorted(g["params"].items()))))
    return CustomerRef(**customer), tuple(out)


# -- WEB: nested JSON form document --------------------------------------------


def _web_fields(doc: Any) -> tuple[CustomerRef, tuple[OrderLine, ...]]:
    if not isinstance(doc, dict) or not isinstance(doc.get("customer"), dict):
        raise MalformedDocument("expected an object with 'customer' and 'lines'")
    c = doc["customer"]
    if "id" not in c:
        raise MalformedDocument("missing customer.id")
    customer = CustomerRef(
        customer_id=str(c["id"]),
        credit_limit=_decimal(c.get("credit_limit", "0")),
        premises_address=str(c.get("premises_address", "")),
        cpe_capabilities=frozenset(map(str, c.get("cpe_capabilities", ()))),
        contract_terms=frozenset(map(str, c.get("contract_terms", ()))),
    )
    raw_lines = doc.get("lines", [])
    if not isinstance(raw_lines, list):
        raise MalformedDocument("'lines' must be a list")
    lines = []
    for n, ln in enumerate(raw_lines, 1):
        if not isinstance(ln, dict) or "product" not in ln:
            raise MalformedDocument(f"lines[{n - 1}] needs a product")
        params = ln.get("params", {})
        if not isinstance(params, dict):
            raise MalformedDocument(f"lines[{n - 1}].params must be an object")
        lines.append(
            OrderLine(
                str(ln.get("id", f"L{n}")),
                str(ln["product"]),
                _int(ln.get("qty", 1)),
                {str(k): str(v) for k, v in sorted(params.items())},
            )
        )
    return customer, tuple(lines)


def parse_web(data: bytes) -> tuple[CustomerRef, tuple[OrderLine, ...]]:
    text = _decode(data)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"bad JSON: {exc.msg}", exc.lineno, exc.colno) from None
    return _web_fields(doc)


def parse_b2b(data: bytes) -> tuple[CustomerRef, tuple[OrderLine, ...]]:
    _decode(data)
    try:
        body = b2b_unwrap(data)
    except BadEnvelope as exc:
        raise MalformedDocument(str(exc)) from None
    return parse_web(body)


DEFAULT_ADAPTERS = {
    "POS": ChannelAdapter("POS", parse_pos),
    "WEB": ChannelAdapter("WEB", parse_web),
    "B2B": ChannelAdapter("B2B", parse_b2b),
}


class ChannelRegistry:
    def __init__(self, adapters: Mapping[str, ChannelAdapter] | None = None):
        self._adapters: dict[str, ChannelAdapter] = dict(DEFAULT_ADAPTERS if adapters is None else adapters)

    def register(self, adapter: ChannelAdapter) -> None:
        if adapter.channel_id in self._adapters:
            raise ValueError(f"channel {adapter.channel_id} already has an adapter")
        self._adapters[adapter.channel_id] = adapter

    def get(self, channel_id: str) -> ChannelAdapter:
        try:
            return self._adapters[channel_id]
        except KeyError:
            raise UnknownChannel(channel_id) from None

    def channels(self) -> list[str]:
        return sorted(self._adapters)


class OrderIdGenerator:
    """channel prefix + monotone counter + seeded random suffix."""

    def __init__(self, seed: int = 0, start: int = 1):
        self._rng = random.Random(seed)
        self._n = start
        self._lock = threading.Lock()

    def __call__(self, channel_id: str) -> str:
        with self._lock:
            n, self._n = self._n, self._n + 1
            return f"{channel_id}-{n:06d}-{self._rng.getrandbits(16):04x}"


def parse_channel_order(
    raw: RawChannelDocument,
    registry: ChannelRegistry | None = None,
    new_id: Callable[[str], str] | None = None,
    now: float = 0.0,
) -> CanonicalOrder:
    adapter = (registry or ChannelRegistry()).get(raw.channel_id)
    customer, lines = adapter.parser(raw.data)
    order_id = (new_id or OrderIdGenerator())(raw.channel_id)
    return CanonicalOrder(order_id, raw.channel_id, customer, lines, now)


def schema_validate(order: CanonicalOrder) -> ValidationReport:
    """Structural checks only; business rules belong to the order manager."""
    report = ValidationReport()
    if order.channel_id not in CHANNELS:
        report.add("UNKNOWN_CHANNEL", order.order_id, order.channel_id)
    if not order.customer.customer_id:
        report.add("NO_CUSTOMER", order.order_id)
    if order.customer.credit_limit < 0:
        report.add("NEGATIVE_CREDIT", order.order_id)
    if not order.lines:
        report.add("NO_LINES", order.order_id)
    seen: set[str] = set()
    for ln in order.lines:
        if ln.qty < 1:
            report.add("BAD_QTY", ln.line_id, str(ln.qty))
        if ln.line_id in seen:
            report.add("DUPLICATE_LINE", ln.line_id)
        if not ln.product_code:
            report.add("NO_PRODUCT", ln.line_id)
        seen.add(ln.line_id)
    return report.sort()


class CaptureService:
    """Controller shared by all channels: parse, gate, journal, enqueue."""

    def __init__(self, bus: MessageBus, journal: Journal, clock=None, registry: ChannelRegistry | None = None, seed: int = 0):
        self.bus = bus
        self.journal = journal
        self.clock = clock or bus.clock
        self.registry = registry or ChannelRegistry()
        self.new_id = OrderIdGenerator(seed)
        self._lock = threading.Lock()
        self._known = set(journal.order_ids())
        bus.declare(MANAGEMENT_QUEUE)

    def parse(self, channel_id: str, data: bytes) -> CanonicalOrder:
        return parse_channel_order(RawChannelDocument(channel_id, data), self.registry, self._fresh_id, self.clock.now())

    def _fresh_id(self, channel_id: str) -> str:
        # the generator restarts with the process; skip ids the journal already holds
        while True:
            oid = self.new_id(channel_id)
            if oid not in self._known:
                return oid

    def submit(self, order: CanonicalOrder) -> str:
        report = schema_validate(order)
        if not report.ok:
            raise InvalidOrder("; ".join(map(str, report.findings)))
        with self._lock:
            if order.order_id in self._known:
                raise DuplicateOrder(order.order_id)
            self.bus.ensure_available()
            self.journal.record(order.order_id, "captured", {"order": order.to_dict()}, self.clock.now())
            self._known.add(order.order_id)
        self.bus.send(MANAGEMENT_QUEUE, order_to_xml(order))
        return order.order_id


def submit(order: CanonicalOrder, bus: MessageBus, journal: Journal) -> str:
    return CaptureService(bus, journal).submit(order)
