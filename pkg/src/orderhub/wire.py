"""XML wire format for everything that travels over the bus.

Element vocabulary: ``message`` (envelope), ``order``, ``line``,
``suborder``, ``item``, ``result``, ``action``, ``binding``, ``param``.
See docs/formats.md for the exact layout.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from decimal import Decimal
from typing import Mapping

from .errors import MalformedDocument
from .fulfillment.actions import Action, FulfillmentResult, Status, Verb
from .model import CanonicalOrder, CustomerRef, Item, OrderLine, SubOrder, SubOrderKind, SubOrderState
from .msgbus import Message


def _parse(text: str | bytes, root: str) -> ET.Element:
    try:
        el = ET.fromstring(text)
    except ET.ParseError as exc:
        line, col = exc.position
        raise MalformedDocument(f"bad XML: {exc}", line, col + 1) from None
    if el.tag != root:
        raise MalformedDocument(f"expected <{root}>, found <{el.tag}>")
    return el


def _attr(el: ET.Element, name: str) -> str:
    value = el.get(name)
    if value is None:
        raise MalformedDocument(f"<{el.tag}> lacks attribute {name!r}")
    return value


def _add_map(parent: ET.Element, tag: str, values: Mapping[str, str]) -> None:
    for k in sorted(values):
        ET.SubElement(parent, tag, key=k).text = str(values[k])


def _read_map(parent: ET.Element, tag: str) -> dict[str, str]:
    return {_attr(e, "key"): e.text or "" for e in parent.findall(tag)}


def _add_set(parent: ET.Element, tag: str, values) -> None:
    holder = ET.SubElement(parent, tag)
    for v in sorted(values):
        ET.SubElement(holder, "key").text = v


def _read_set(parent: ET.Element, tag: str) -> frozenset[str]:
    holder = parent.find(tag)
    if holder is None:
        return frozenset()
    return frozenset(e.text or "" for e in holder.findall("key"))


def _tostring(el: ET.Element) -> str:
    return ET.tostring(el, encoding="unicode")


# -- order -------------------------------------------------------------------


def order_element(order: CanonicalOrder) -> ET.Element:
    el = ET.Element("order", id=order.order_id, channel=order.channel_id, created_at=repr(order.created_at))
    c = order.customer
    cust = ET.SubElement(el, "customer", id=c.customer_id, credit_limit=str(c.credit_limit))
    ET.SubElement(cust, "premises_address").text = c.premises_address
    _add_set(cust, "cpe_capabilities", c.cpe_capabilities)
    _add_set(cust, "contract_terms", c.contract_terms)
    for ln in order.lines:
        line = ET.SubElement(el, "line", id=ln.line_id, product=ln.product_code, qty=str(ln.qty))
        _add_map(line, "param", ln.params)
    return el


def order_to_xml(order: CanonicalOrder) -> str:
    return _tostring(order_element(order))


def order_from_element(el: ET.Element) -> CanonicalOrder:
    cust = el.find("customer")
    if cust is None:
        raise MalformedDocument("<order> lacks <customer>")
    try:
        customer = CustomerRef(
            customer_id=_attr(cust, "id"),
            credit_limit=Decimal(cust.get("credit_limit", "0")),
            premises_address=cust.findtext("premises_address") or "",
            cpe_capabilities=_read_set(cust, "cpe_capabilities"),
            contract_terms=_read_set(cust, "contract_terms"),
        )
        lines = tuple(
            OrderLine(_attr(ln, "id"), _attr(ln, "product"), int(_attr(ln, "qty")), _read_map(ln, "param"))
            for ln in el.findall("line")
        )
        return CanonicalOrder(
            order_id=_attr(el, "id"),
            channel_id=_attr(el, "channel"),
            customer=customer,
            lines=lines,
            created_at=float(el.get("created_at", "0")),
        )
    except (ValueError, ArithmeticError) as exc:
        raise MalformedDocument(f"bad order field: {exc}") from None


def order_from_xml(text: str | bytes) -> CanonicalOrder:
    return order_from_element(_parse(text, "order"))


# -- sub-order dispatch --------------------------------------------------------


def dispatch_to_xml(suborder: SubOrder, attempt: int, bindings: Mapping[str, str]) -> str:
    el = ET.Element(
        "suborder",
        id=suborder.suborder_id,
        order=suborder.order_id,
        target=suborder.target_id,
        kind=suborder.kind.value,
        customer=suborder.customer_id,
        attempt=str(attempt),
    )
    if suborder.line_id is not None:
        el.set("line", suborder.line_id)
    for item in suborder.items:
        it = ET.SubElement(el, "item", service=item.service_code)
        _add_map(it, "param", item.params)
    _add_set(el, "requires", suborder.requires_data)
    _add_set(el, "provides", suborder.provides_data)
    _add_set(el, "depends_on", suborder.depends_on)
    _add_map(el, "binding", bindings)
    return _tostring(el)


def dispatch_from_xml(text: str | bytes) -> tuple[SubOrder, int, dict[str, str]]:
    el = _parse(text, "suborder")
    try:
        sub = SubOrder(
            suborder_id=_attr(el, "id"),
            order_id=_attr(el, "order"),
            line_id=el.get("line"),
            target_id=_attr(el, "target"),
            kind=SubOrderKind(_attr(el, "kind")),
            customer_id=el.get("customer", ""),
            items=tuple(Item(_attr(i, "service"), _read_map(i, "param")) for i in el.findall("item")),
            requires_data=_read_set(el, "requires"),
            provides_data=_read_set(el, "provides"),
            depends_on=_read_set(el, "depends_on"),
            state=SubOrderState.DISPATCHED,
        )
        return sub, int(_attr(el, "attempt")), _read_map(el, "binding")
    except ValueError as exc:
        raise MalformedDocument(f"bad sub-order field: {exc}") from None


# -- fulfillment result --------------------------------------------------------


def result_to_xml(result: FulfillmentResult) -> str:
    el = ET.Element("result", suborder=result.suborder_id, status=result.status.value, attempt=str(result.attempt))
    if result.task_id:
        el.set("task", result.task_id)
    _add_map(el, "binding", result.provided_data)
    if result.error:
        ET.SubElement(el, "error", code=result.error[0]).text = result.error[1]
    for a in result.actions:
        ae = ET.SubElement(el, "action", idx=str(a.action_idx), verb=a.verb.value, key=a.idempotency_key)
        _add_map(ae, "param", a.params)
    return _tostring(el)


def result_from_xml(text: str | bytes) -> FulfillmentResult:
    el = _parse(text, "result")
    err = el.find("error")
    try:
        return FulfillmentResult(
            suborder_id=_attr(el, "suborder"),
            status=Status(_attr(el, "status")),
            provided_data=_read_map(el, "binding"),
            error=(_attr(err, "code"), err.text or "") if err is not None else None,
            attempt=int(_attr(el, "attempt")),
            actions=tuple(
                Action(int(_attr(a, "idx")), Verb(_attr(a, "verb")), _read_map(a, "param"), _attr(a, "key"))
                for a in el.findall("action")
            ),
            task_id=el.get("task"),
        )
    except ValueError as exc:
        raise MalformedDocument(f"bad result field: {exc}") from None


# -- bus envelope -------------------------------------------------------------


def message_to_xml(msg: Message) -> str:
    el = ET.Element("message", id=msg.message_id, queue=msg.queue, ts=repr(msg.enqueued_at))
    if msg.correlation_id:
        el.set("correlation", msg.correlation_id)
    if msg.reply_to:
        el.set("reply_to", msg.reply_to)
    body = ET.SubElement(el, "body")
    payload = msg.payload
    if isinstance(payload, str) and payload.startswith("<"):
        body.append(ET.fromstring(payload))
    else:
        body.text = str(payload)
    return _tostring(el)


def message_from_xml(text: str | bytes) -> Message:
    el = _parse(text, "message")
    body = el.find("body")
    if body is None:
        raise MalformedDocument("<message> lacks <body>")
    children = list(body)
    payload = _tostring(children[0]) if children else (body.text or "")
    return Message(
        message_id=_attr(el, "id"),
        queue=_attr(el, "queue"),
        payload=payload,
        correlation_id=el.get("correlation"),
        reply_to=el.get("reply_to"),
        enqueued_at=float(el.get("ts", "0")),
    )
