from __future__ import annotations

import dataclasses
import socket
import threading
import time

import pytest

from privbus.aggregator import AggregateRecord, AggregatorConfig
from privbus.aggregator_service import AggregatorService
from privbus.attestation import Role
from privbus.attestor import attest, attestor_info
from privbus.broker import BrokerClient
from privbus.clients import (
    MDC,
    AuthorizationDenied,
    Authorizer,
    Constant,
    Consumer,
    ConsumerConfig,
    DispatchError,
    Dispatcher,
    DispatcherLink,
    Meter,
    MeterConfig,
    Producer,
    ProducerConfig,
    RandomWalk,
    mdc_process,
)
from privbus.clients.meter import paced
from privbus.crypto import DataKey, new_signing_key, open_counter_payload
from privbus.envelope import EncryptionMode, Measurement, PrivacyLevel, encode_publication
from privbus.identity import role_code

from conftest import wait_until

HIGH = frozenset({PrivacyLevel.HIGH})
LOW = frozenset({PrivacyLevel.LOW})


# -- meter -----------------------------------------------------------------


def test_constant_meter():
    m = Meter(MeterConfig(3, 1.0, Constant(1234)))
    out = [m.tick(1000 + i) for i in range(5)]
    assert [x.value_mw for x in out] == [1234] * 5
    assert [x.seq for x in out] == list(range(5))
    assert all(x.meter_id == 3 for x in out)


def test_random_walk_reproducible_and_bounded():
    def values(seed):
        m = Meter(MeterConfig(1, 1.0, RandomWalk(seed, step=1000, start_mw=500)))
        return [m.tick(0).value_mw for _ in range(2000)]

    a = values(11)
    assert a == values(11) and a != values(12)
    assert min(a) >= 0
    assert all(abs(x - y) <= 1000 for x, y in zip(a, a[1:]))


def test_rate_must_be_positive():
    with pytest.raises(ValueError):
        MeterConfig(1, 0.0)


def test_paced_fake_clock_spans_count_minus_one_periods():
    now = [0.0]

    def sleep(d):
        now[0] += d

    m = Meter(MeterConfig(1, 1.0))
    out = list(paced(m, 60, clock=lambda: now[0], sleep=sleep, wall_ms=lambda: int(now[0] * 1000)))
    stamps = [x.timestamp_ms for x in out]
    assert stamps[0] == 0 and stamps[-1] - stamps[0] == 59_000
    assert all(b - a == 1000 for a, b in zip(stamps, stamps[1:]))


def test_paced_does_not_drift_after_late_tick():
    now = [0.0]
    m = Meter(MeterConfig(1, 10.0))
    gen = paced(m, 5, clock=lambda: now[0], sleep=lambda d: now.__setitem__(0, now[0] + d), wall_ms=lambda: int(now[0] * 1000))
    next(gen)
    now[0] += 0.25  # consumer of the generator stalls
    rest = [x.timestamp_ms for x in gen]
    assert rest == [250, 250, 300, 400]


# -- MDC -------------------------------------------------------------------


def test_mdc_round_trip_and_no_plaintext_leak():
    dk = DataKey(0, bytes(range(32)))
    for seq in range(200):
        m = Measurement(42, 1_700_000_000_000 + seq, 123_456 + seq, seq)
        pub = mdc_process(m, dk)
        assert pub.header.privacy is PrivacyLevel.HIGH and pub.header.enc is EncryptionMode.COUNTER
        assert Measurement.from_bytes(open_counter_payload(dk, 42, pub.payload)) == m
        raw = m.to_bytes()
        assert not any(raw[i : i + 8] in pub.payload for i in range(len(raw) - 7))


def test_mdc_same_reading_different_ciphertexts():
    dk = DataKey.generate(0)
    a = mdc_process(Measurement(1, 5, 5, 0), dk)
    b = mdc_process(Measurement(1, 5, 5, 1), dk)
    assert a.payload[4:] != b.payload[4:]


def test_mdc_rotation_deposits_before_use():
    deposited = []
    mdc = MDC(DataKey.generate(0), rotate_every=3, on_rotate=deposited.append)
    epochs = [mdc.process(Measurement(1, 0, 0, i)).header.key_epoch for i in range(7)]
    assert epochs == [0, 0, 0, 1, 1, 1, 2]
    assert [d.key_id for d in deposited] == [1, 2]


# -- dispatcher ------------------------------------------------------------


class SinkServer:
    """Stand-in broker that records raw bytes; reading can be held off."""

    def __init__(self, reading: bool = True):
        self.listener = socket.create_server(("127.0.0.1", 0))
        self.address = self.listener.getsockname()[:2]
        self.data = bytearray()
        self.go = threading.Event()
        if reading:
            self.go.set()
        threading.Thread(target=self._run, daemon=True).start()

    def _run(self):
        conn, _ = self.listener.accept()
        self.go.wait()
        while True:
            chunk = conn.recv(1 << 16)
            if not chunk:
                break
            self.data += chunk
        conn.close()

    def close(self):
        self.listener.close()


def test_dispatcher_forwards_verbatim():
    sink = SinkServer()
    tapped = bytearray()
    d = Dispatcher(sink.address, tap=tapped.extend).start()
    dk = DataKey.generate(0)
    frames = [encode_publication(mdc_process(Measurement(7, i, i, i), dk)) for i in range(1000)]
    with DispatcherLink(d.address) as link:
        for i in range(0, 1000, 100):
            link.send_frames(frames[i : i + 100])
    assert wait_until(lambda: len(sink.data) == sum(map(len, frames)))
    assert bytes(sink.data) == b"".join(frames)
    assert d.forwarded == 1000
    d.stop()
    sink.close()


def test_dispatcher_blocks_under_back_pressure():
    sink = SinkServer(reading=False)
    d = Dispatcher(sink.address).start()
    frame = encode_publication(mdc_process(Measurement(7, 0, 0, 0), DataKey.generate(0)))
    total = 200_000
    sent = [0]

    def produce():
        with DispatcherLink(d.address) as link:
            for _ in range(total // 1000):
                link.send_frames([frame] * 1000)
                sent[0] += 1000

    t = threading.Thread(target=produce, daemon=True)
    t.start()
    time.sleep(1.0)
    assert t.is_alive() and sent[0] < total  # sender is held back, nothing dropped
    sink.go.set()
    t.join(30)
    assert wait_until(lambda: len(sink.data) == total * len(frame), timeout=30)
    d.stop()
    sink.close()


def test_dispatcher_reports_unreachable_broker():
    s = socket.create_server(("127.0.0.1", 0))
    addr = s.getsockname()[:2]
    s.close()
    d = Dispatcher(addr, retries=2, backoff=0.01)
    with pytest.raises(DispatchError):
        d.dispatch(b"x")
    d.stop()


def test_dispatcher_module_holds_no_keys():
    import privbus.clients.dispatcher as mod

    assert "DataKey" not in vars(mod) and "crypto" not in open(mod.__file__).read()


# -- authorizer ------------------------------------------------------------


def test_authorizer_decisions(broker, attestor, platform):
    sk = new_signing_key()
    ctl = BrokerClient(broker.address)
    ctl.register(5, sk)
    grant = bytes.fromhex(attestor_info(attestor.address)["grant_public"])
    auth = Authorizer(5, sk, ctl, grant)
    assert auth.authorize(1, LOW).levels == LOW
    with pytest.raises(AuthorizationDenied):
        auth.authorize(1, HIGH)
    session = attest(attestor.address, platform, role_code(Role.CONSUMER), Role.CONSUMER, subscriber_id=2)
    assert auth.authorize(2, HIGH, token=session.token).levels == HIGH
    with pytest.raises(AuthorizationDenied):
        auth.authorize(3, HIGH, token=session.token)  # token is bound to subscriber 2
    forged = dataclasses.replace(session.token, signature=bytes(64))
    with pytest.raises(AuthorizationDenied):
        auth.authorize(2, HIGH, token=forged)
    assert len(ctl.table()) == 2
    session.close()
    ctl.close()


# -- end to end ------------------------------------------------------------


@pytest.fixture
def producer(broker, attestor, platform):
    p = Producer(ProducerConfig(7, broker.address, rate_hz=1000, attestor=attestor.address, platform=platform)).start()
    yield p
    p.close()


def consumer(broker, attestor, platform, sid, publishers, levels, attested=True, **kw):
    cfg = ConsumerConfig(
        sid,
        broker.address,
        publishers,
        levels,
        attestor=attestor.address if attested else None,
        platform=platform if attested else None,
        code=role_code(Role.CONSUMER) if attested else None,
        **kw,
    )
    return Consumer(cfg)


def test_attested_consumer_decrypts(broker, attestor, platform, producer):
    c = consumer(broker, attestor, platform, 100, {7: producer.auth_address}, HIGH).start()
    assert producer.authorizer.wait_for(1, 5)
    sent = [producer.publication() for _ in range(300)]
    for p in sent:
        producer.publish(p)
    got = c.collect(300, 10)
    assert [d.record.seq for d in got] == list(range(300))
    assert all(d.header.privacy is PrivacyLevel.HIGH for d in got)
    assert c.stats.decode_failures == 0 and c.stats.out_of_order == 0
    c.close()


def test_unattested_consumer_denied_high(broker, attestor, platform, producer):
    c = consumer(broker, attestor, platform, 101, {7: producer.auth_address}, HIGH, attested=False)
    with pytest.raises(AuthorizationDenied):
        c.start()
    c.attach()
    c.subscribe()
    assert c.stats.denied and not c.subscriptions
    producer.publish(producer.publication())
    assert c.collect(1, 1.0) == []
    c.close()


def test_key_rotation_needs_refresh(broker, attestor, platform):
    p = Producer(
        ProducerConfig(8, broker.address, attestor=attestor.address, platform=platform, rotate_every=50)
    ).start()
    stale = consumer(broker, attestor, platform, 110, {8: p.auth_address}, HIGH, auto_refresh=False).start()
    fresh = consumer(broker, attestor, platform, 111, {8: p.auth_address}, HIGH).start()
    assert p.authorizer.wait_for(2, 5)
    for _ in range(150):
        p.publish(p.publication())
    got_fresh = fresh.collect(150, 10)
    assert [d.record.seq for d in got_fresh] == list(range(150))
    got_stale = stale.collect(150, 2)
    assert [d.record.seq for d in got_stale] == list(range(50))
    assert stale.stats.decode_failures == 100
    for c in (stale, fresh):
        c.close()
    p.close()


def test_low_consumer_sees_only_aggregates(broker, attestor, platform, producer):
    agg = AggregatorService(
        900, broker.address, attestor.address, platform, {7: producer.auth_address},
        AggregatorConfig(window_ms=60_000, grace_ms=100),
    ).start()
    low = consumer(broker, attestor, platform, 120, {900: agg.auth_address, 7: producer.auth_address}, LOW, attested=False)
    low.start()
    assert not low.stats.denied
    assert wait_until(lambda: len(producer.authorizer.authorized) == 2)
    hour = 3_600_000
    base = (time.time_ns() // 1_000_000 // hour + 1) * hour  # a window that is not yet due
    sent = []
    for i in range(40):
        pub = producer.publication(base + i * 100)
        sent.append(Measurement.from_bytes(open_counter_payload(producer.mdc.dk, 7, pub.payload)))
        producer.publish(pub)
    deadline = time.monotonic() + 10
    while agg.aggregator.ingested < 40 and time.monotonic() < deadline:
        agg.step()
    assert agg.published == []
    agg.stop(flush=True)
    got = list(low.deliveries(timeout=3, idle=1.0))
    assert got and all(isinstance(d.record, AggregateRecord) for d in got)
    assert all(d.header.privacy is PrivacyLevel.LOW for d in got)
    regional_sum = sum(d.record.sum_mw for d in got)
    assert regional_sum == sum(m.value_mw for m in sent)
    low.close()
