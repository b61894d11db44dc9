import threading

import pytest

from orderhub.errors import BusUnavailable, Empty, NotInFlight, RequestTimeout, UnknownQueue
from orderhub.msgbus import MessageBus, SimClock


@pytest.fixture
def bus():
    b = MessageBus(SimClock(), visibility_timeout=10, max_redeliveries=2)
    b.declare("q")
    return b


def test_send_receive_ack(bus):
    bus.send("q", "hello", correlation_id="c1", reply_to="r")
    msg = bus.try_receive("q")
    assert (msg.payload, msg.correlation_id, msg.reply_to, msg.delivery_count) == ("hello", "c1", "r", 1)
    bus.ack(msg)
    assert bus.idle(["q"])
    with pytest.raises(NotInFlight):
        bus.ack(msg)


def test_unacked_message_is_redelivered_after_timeout(bus):
    bus.send("q", "x")
    first = bus.try_receive("q")
    assert bus.try_receive("q") is None
    bus.clock.advance(10)
    again = bus.try_receive("q")
    assert again.message_id == first.message_id
    assert again.delivery_count == 2
    with pytest.raises(NotInFlight):
        bus.ack(first)  # stale receipt
    bus.ack(again)


def test_dead_letter_after_budget(bus):
    bus.send("q", "poison")
    for _ in range(3):
        assert bus.try_receive("q") is not None
        bus.clock.advance(10)
    assert bus.try_receive("q") is None
    (dead,) = bus.peek("q.dead")
    assert dead.payload == "poison"
    assert dead.delivery_count == 3


def test_release_makes_message_visible_now(bus):
    bus.send("q", "x")
    msg = bus.try_receive("q")
    bus.release(msg)
    assert bus.try_receive("q").message_id == msg.message_id


def test_delayed_send(bus):
    bus.send("q", "later", delay=5)
    assert bus.try_receive("q") is None
    assert bus.next_visible_at(["q"]) == 5
    bus.clock.advance_to(5)
    assert bus.try_receive("q").payload == "later"


def test_duplicate_deliveries_share_message_id():
    b = MessageBus(SimClock(), duplicate_deliveries=True)
    b.declare("q")
    b.send("q", "x")
    a, c = b.try_receive("q"), b.try_receive("q")
    assert a.message_id == c.message_id and a.receipt != c.receipt
    b.ack(a)
    b.ack(c)


def test_unknown_queue_and_outage(bus):
    with pytest.raises(UnknownQueue):
        bus.send("nope", 1)
    bus.available = False
    with pytest.raises(BusUnavailable):
        bus.send("q", 1)


def test_receive_timeout(bus):
    with pytest.raises(Empty):
        bus.receive("q", timeout=0.01)


def test_request_reply_matches_correlation():
    b = MessageBus()
    b.declare("svc")

    def server():
        msg = b.receive("svc", timeout=2)
        b.send(msg.reply_to, "noise", correlation_id="other")
        b.send(msg.reply_to, msg.payload.upper(), correlation_id=msg.correlation_id)
        b.ack(msg)

    t = threading.Thread(target=server)
    t.start()
    assert b.request("svc", "ping", timeout=2) == "PING"
    t.join()


def test_request_times_out():
    b = MessageBus()
    b.declare("svc")
    with pytest.raises(RequestTimeout):
        b.request("svc", "ping", timeout=0.05)


def test_visibility_timeout_must_be_positive():
    with pytest.raises(ValueError):
        MessageBus(SimClock()).declare("bad", visibility_timeout=0)
