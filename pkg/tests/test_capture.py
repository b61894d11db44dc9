import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from orderhub.capture import (
    MANAGEMENT_QUEUE,
    CaptureService,
    OrderIdGenerator,
    RawChannelDocument,
    parse_channel_order,
    parse_pos,
    parse_web,
    schema_validate,
)
from orderhub.errors import BadEnvelope, DuplicateOrder, InvalidOrder, MalformedDocument, UnknownChannel
from orderhub.fulfillment.b2b import B2BEnvelope, b2b_unwrap, b2b_wrap
from orderhub.journal import Journal
from orderhub.model import CanonicalOrder, CustomerRef, OrderLine
from orderhub.msgbus import MessageBus, SimClock
from orderhub.wire import order_from_xml, order_to_xml


def test_pos_and_web_agree(fixtures):
    pos = parse_channel_order(RawChannelDocument("POS", (fixtures / "orders/multiplay.pos").read_bytes()))
    web = parse_channel_order(RawChannelDocument("WEB", (fixtures / "orders/multiplay.json").read_bytes()))
    assert pos.content() == web.content()
    assert pos.order_id.startswith("POS-") and web.order_id.startswith("WEB-")


def test_b2b_envelope_carries_web_body(fixtures):
    data = (fixtures / "orders/partner_voice.b2b").read_bytes()
    env = B2BEnvelope.from_bytes(data)
    assert env.partner_id == "PARTNER-ACME"
    b2b = parse_channel_order(RawChannelDocument("B2B", data))
    web = parse_channel_order(RawChannelDocument("WEB", (fixtures / "orders/partner_voice.json").read_bytes()))
    assert b2b.content() == web.content()


@given(st.binary(max_size=200))
def test_b2b_wrap_is_bit_exact(body):
    assert b2b_unwrap(b2b_wrap("P", body).to_bytes()) == body


@pytest.mark.parametrize("data", [b"<nope/>", b"garbage", b'<envelope partner_id="p"><body>###</body></envelope>'])
def test_bad_envelopes(data):
    with pytest.raises(BadEnvelope):
        b2b_unwrap(data)


@pytest.mark.parametrize(
    "doc, line",
    [
        (b"customer.id=C\nnonsense\n", 2),
        (b"customer.id=C\ncustomer.id=D\n", 2),
        (b"customer.id=C\nline.1.wat=3\n", 2),
        (b"   \n", 1),
    ],
)
def test_pos_errors_have_positions(doc, line):
    with pytest.raises(MalformedDocument) as exc:
        parse_pos(doc)
    assert exc.value.line == line


def test_pos_groups_lines_and_params():
    customer, lines = parse_pos(
        b"# c\ncustomer.id=C\ncustomer.cpe=a, b\nline.2.product=Y\nline.1.product=X\nline.1.qty=2\nline.1.param.k=v=w\n"
    )
    assert customer.cpe_capabilities == {"a", "b"}
    assert [(ln.line_id, ln.product_code, ln.qty) for ln in lines] == [("L1", "X", 2), ("L2", "Y", 1)]
    assert lines[0].params == {"k": "v=w"}


def test_web_bad_json_position():
    with pytest.raises(MalformedDocument) as exc:
        parse_web(b'{"customer": {"id": "C"},\n "lines": [}')
    assert exc.value.line == 2


def test_web_shape_errors():
    with pytest.raises(MalformedDocument):
        parse_web(json.dumps({"customer": {}, "lines": []}).encode())
    with pytest.raises(MalformedDocument):
        parse_web(json.dumps({"customer": {"id": "C"}, "lines": [{"id": "L1"}]}).encode())


def test_unknown_channel():
    with pytest.raises(UnknownChannel):
        parse_channel_order(RawChannelDocument("FAX", b"x"))


def test_id_generator_is_seeded_and_monotone():
    a, b = OrderIdGenerator(5), OrderIdGenerator(5)
    ids = [a("WEB") for _ in range(3)]
    assert ids == [b("WEB") for _ in range(3)]
    assert [i.split("-")[1] for i in ids] == ["000001", "000002", "000003"]


def _order(**kw):
    base = dict(order_id="O-1", channel_id="WEB", customer=CustomerRef("C"), lines=(OrderLine("L1", "P"),))
    base.update(kw)
    return CanonicalOrder(**base)


@pytest.mark.parametrize(
    "order, rule",
    [
        (_order(lines=()), "NO_LINES"),
        (_order(lines=(OrderLine("L1", "P", 0),)), "BAD_QTY"),
        (_order(lines=(OrderLine("L1", "P"), OrderLine("L1", "Q"))), "DUPLICATE_LINE"),
        (_order(customer=CustomerRef("")), "NO_CUSTOMER"),
        (_order(channel_id="FAX"), "UNKNOWN_CHANNEL"),
    ],
)
def test_schema_gate(order, rule):
    assert rule in schema_validate(order).rules()


def test_submit_journals_then_enqueues():
    bus = MessageBus(SimClock())
    journal = Journal()
    svc = CaptureService(bus, journal)
    oid = svc.submit(_order())
    (rec,) = journal.records_for(oid)
    assert rec.event == "captured"
    msg = bus.try_receive(MANAGEMENT_QUEUE)
    assert order_from_xml(msg.payload) == _order()
    with pytest.raises(DuplicateOrder):
        svc.submit(_order())
    with pytest.raises(InvalidOrder):
        svc.submit(_order(order_id="O-2", lines=()))
    assert len(journal) == 1


def test_fresh_ids_skip_journalled_ones():
    journal = Journal()
    first = CaptureService(MessageBus(SimClock()), journal, seed=3)
    used = first.submit(first.parse("WEB", b'{"customer": {"id": "C"}, "lines": [{"id": "L1", "product": "P"}]}'))
    # a restarted process has a fresh generator with the same seed
    second = CaptureService(MessageBus(SimClock()), journal, seed=3)
    again = second.parse("WEB", b'{"customer": {"id": "C"}, "lines": [{"id": "L1", "product": "P"}]}')
    assert again.order_id != used


_text = st.text(alphabet=st.characters(blacklist_categories=("Cs", "Cc")), max_size=12)


@given(
    st.builds(
        CanonicalOrder,
        order_id=_text,
        channel_id=st.sampled_from(["POS", "WEB"]),
        customer=st.builds(CustomerRef, customer_id=_text, cpe_capabilities=st.frozensets(_text, max_size=3)),
        lines=st.lists(
            st.builds(OrderLine, line_id=_text, product_code=_text, qty=st.integers(1, 9),
                      params=st.dictionaries(_text, _text, max_size=3)),
            max_size=3,
        ).map(tuple),
        created_at=st.floats(0, 1e6),
    )
)
def test_order_xml_round_trip(order):
    assert order_from_xml(order_to_xml(order)) == order
