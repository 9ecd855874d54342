"""Asyncio broker: connection I/O feeding one bounded ingress queue and a
single routing stage.

Back-pressure is flow control: when the ingress queue is at capacity the
broker stops reading from publisher sockets (``pause_reading``), the TCP
window fills and senders block. Nothing is dropped. Each subscriber has a
bounded buffer of frames not yet handed to its socket; a subscriber that
overflows it is disconnected so it cannot stall the others.
"""
from __future__ import annotations

import asyncio
import json
import logging
import signal
import threading
import time
from collections import deque
from dataclasses import dataclass

from ..crypto import DataKey, open_counter_payload, seal_counter_payload, verify_key_from_bytes
from ..envelope import (
    EncryptionMode,
    FrameError,
    MessageHeader,
    Subscription,
    TruncatedFrame,
    encode_publication,
    parse_header,
    Publication,
)
from ..wire import CTL_TOPIC, control_frame, json_reply, verify_body
from . import routing
from .metrics import CSV_COLUMNS, BrokerMetrics, Counters, LatencyHistogram, Sampler
from .routing import RoutingError, RoutingTable, SecureMatcher

log = logging.getLogger(__name__)

MODE_SECURE = "secure"
MODE_REGULAR = "regular"


@dataclass
class BrokerConfig:
    host: str = "127.0.0.1"
    port: int = 7474
    capacity: int = 65536
    mode: str = MODE_REGULAR
    subscriber_buffer: int = 8192
    overhead_us: float = 0.0
    key_mode: str = "source"
    attestor: str | None = None
    platform_key: str | None = None
    platform_id: int = 1
    expected_code: str | None = None
    metrics_out: str | None = None
    sample_hz: float = 200.0
    batch: int = 256
    write_high_water: int = 1 << 20

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.mode not in (MODE_SECURE, MODE_REGULAR):
            raise ValueError(f"mode must be secure or regular, not {self.mode!r}")
        if self.key_mode not in ("source", "broker"):
            raise ValueError(f"unknown key mode {self.key_mode!r}")


class Connection(asyncio.Protocol):
    def __init__(self, broker: Broker):
        self.broker = broker
        self.buf = bytearray()
        self.transport: asyncio.Transport | None = None
        self.paused = False
        self.closed = False
        self.writable = True
        self.subscriber_id: int | None = None
        self.pending: deque = deque()

    def connection_made(self, transport) -> None:
        self.transport = transport
        transport.set_write_buffer_limits(high=self.broker.cfg.write_high_water)

    def data_received(self, data: bytes) -> None:
        self.buf += data
        self.broker._pump(self)

    def connection_lost(self, exc) -> None:
        self.closed = True
        self.broker._forget(self)

    def pause_writing(self) -> None:
        self.writable = False

    def resume_writing(self) -> None:
        self.writable = True
        self.broker._flush(self)

    def send(self, data: bytes) -> None:
        if not self.closed:
            self.transport.write(data)


class Broker:
    def __init__(self, cfg: BrokerConfig | None = None):
        self.cfg = cfg or BrokerConfig()
        self.table = RoutingTable()
        self.counters = Counters(self.cfg.capacity)
        self.ingress: deque = deque()
        self.subscribers: dict[int, Connection] = {}
        self._paused: dict[Connection, None] = {}
        self._wake: asyncio.Event | None = None
        self._stop: asyncio.Event | None = None
        self._server: asyncio.base_events.Server | None = None
        self.address: tuple[str, int] | None = None
        self.sampler: Sampler | None = None
        if self.cfg.mode == MODE_SECURE:
            self._secure = SecureMatcher(self.table, self.cfg.overhead_us)
        else:
            self._secure = None
        self.code_identity = None
        self._attested = None
        self._dissemination: DataKey | None = None
        self._publisher_keys: dict[tuple[int, int], DataKey] = {}

    # -- synchronous surface -------------------------------------------------

    def register_publisher(self, publisher_id: int, verification_key) -> int:
        self.table.register_publisher(publisher_id, verification_key)
        return publisher_id

    def submit_subscription(self, s: Subscription) -> bool:
        return self.table.submit(s)

    def route(self, h: MessageHeader) -> tuple[int, ...]:
        return self.table.route(h)

    def metrics_snapshot(self) -> BrokerMetrics:
        c = self.counters
        counts = c.latency.snapshot()
        return BrokerMetrics(
            published=c.published,
            delivered=c.delivered,
            rejected=c.rejected,
            queue_depth=len(self.ingress),
            capacity=self.cfg.capacity,
            undeliverable=c.undeliverable,
            disconnects=c.disconnects,
            lat_p50_us=LatencyHistogram.percentile(counts, 50),
            lat_p99_us=LatencyHistogram.percentile(counts, 99),
            cpu_ms=round(time.process_time() * 1000, 3),
            per_publisher=dict(c.per_publisher),
        )

    # -- startup -------------------------------------------------------------

    def _attest_self(self) -> None:
        """Secure mode checks the routing engine's code identity at startup;
        broker-held key mode also needs an attested session with the Attestor."""
        from ..attestation import Platform, Role, module_identity
        from ..attestor import DISSEMINATION_ID, attest
        from ..crypto import signing_key_from_hex

        self.code_identity = module_identity(routing)
        if self.cfg.expected_code and self.cfg.expected_code != self.code_identity.hex():
            raise RuntimeError("routing engine code identity does not match the expected digest")
        need_session = self.cfg.key_mode == "broker" or (self.cfg.mode == MODE_SECURE and self.cfg.attestor)
        if not need_session:
            return
        if not (self.cfg.attestor and self.cfg.platform_key):
            raise RuntimeError("attestor address and platform key are required")
        platform = Platform(signing_key_from_hex(self.cfg.platform_key), self.cfg.platform_id)
        self._attested = attest(self.cfg.attestor, platform, self.code_identity, Role.BROKER)
        if self.cfg.key_mode == "broker":
            self._dissemination = DataKey.generate(0)
            self._attested.deposit(DISSEMINATION_ID, self._dissemination)

    async def start(self) -> tuple[str, int]:
        self._attest_self()
        loop = asyncio.get_running_loop()
        self._wake = asyncio.Event()
        self._stop = asyncio.Event()
        self._server = await loop.create_server(lambda: Connection(self), self.cfg.host, self.cfg.port)
        self.address = self._server.sockets[0].getsockname()[:2]
        self._router = asyncio.ensure_future(self._route_loop())
        self.sampler = Sampler(self.counters, lambda: len(self.ingress), self.cfg.sample_hz).start()
        log.info("broker listening on %s:%s mode=%s capacity=%d", *self.address, self.cfg.mode, self.cfg.capacity)
        return self.address

    async def serve(
        self, ready: threading.Event | None = None, install_signals: bool = False, on_ready=None
    ) -> None:
        await self.start()
        if install_signals:
            loop = asyncio.get_running_loop()
            for sig in (signal.SIGTERM, signal.SIGINT):
                loop.add_signal_handler(sig, self.request_stop)
        if ready is not None:
            ready.set()
        if on_ready is not None:
            on_ready(self.address)
        try:
            await self._stop.wait()
        finally:
            await self.close()

    def request_stop(self) -> None:
        if self._stop is not None:
            self._stop.set()

    async def close(self) -> None:
        if self.sampler is not None:
            self.sampler.stop()
            self.sampler.sample()
            if self.cfg.metrics_out:
                self.sampler.write_csv(self.cfg.metrics_out)
        self._router.cancel()
        self._server.close()
        for conn in list(self.subscribers.values()):
            if conn.transport:
                conn.transport.close()
        try:
            await asyncio.wait_for(self._server.wait_closed(), 1.0)
        except (asyncio.TimeoutError, Exception):
            pass
        if self._attested is not None:
            self._attested.close()

    # -- ingress -------------------------------------------------------------

    def _pump(self, conn: Connection) -> None:
        buf = conn.buf
        q = self.ingress
        cap = self.cfg.capacity
        c = self.counters
        keys = self.table.publisher_keys
        pos = 0
        try:
            while len(q) < cap:
                try:
                    header, start, end = parse_header(buf, pos)
                except TruncatedFrame:
                    break
                if header.topic == CTL_TOPIC and header.publisher_id == 0:
                    self._control(conn, bytes(buf[start:end]))
                elif header.publisher_id in keys:
                    q.append((time.monotonic_ns(), header, bytes(buf[pos:end]), start - pos))
                    c.published += 1
                    pp = c.per_publisher
                    pp[header.publisher_id] = pp.get(header.publisher_id, 0) + 1
                else:
                    c.rejected += 1
                pos = end
        except FrameError as exc:
            log.warning("closing connection after malformed frame: %s", exc)
            c.rejected += 1
            del buf[:]
            conn.transport.close()
            return
        finally:
            if pos:
                del buf[:pos]
        if q and not self._wake.is_set():
            self._wake.set()
        if len(q) >= cap:
            if not conn.paused and not conn.closed:
                conn.transport.pause_reading()
                conn.paused = True
                self._paused[conn] = None
        elif conn.paused:
            conn.paused = False
            self._paused.pop(conn, None)
            if not conn.closed:
                conn.transport.resume_reading()

    def _resume_paused(self) -> None:
        for conn in list(self._paused):
            if len(self.ingress) >= self.cfg.capacity:
                return
            self._pump(conn)

    def _control(self, conn: Connection, payload: bytes) -> None:
        try:
            body = json.loads(payload)
            reply = self._control_op(conn, body)
        except RoutingError as exc:
            reply = json_reply(False, error=exc.code, detail=str(exc))
        except (ValueError, KeyError, TypeError) as exc:
            reply = json_reply(False, error="bad-request", detail=str(exc))
        conn.send(control_frame(CTL_TOPIC, reply))

    def _control_op(self, conn: Connection, body: dict) -> dict:
        op = body.get("op")
        if op == "register":
            key = verify_key_from_bytes(bytes.fromhex(body["verify_key"]))
            if not verify_body(body, key):
                return json_reply(False, error="bad-signature")
            self.register_publisher(int(body["publisher_id"]), key)
            return json_reply()
        if op == "subscribe":
            stored = self.submit_subscription(Subscription.from_dict(body["subscription"]))
            return json_reply(stored=stored)
        if op == "attach":
            sid = int(body["subscriber_id"])
            old = self.subscribers.get(sid)
            if old is not None and old is not conn and old.transport:
                old.transport.close()
            conn.subscriber_id = sid
            self.subscribers[sid] = conn
            return json_reply()
        if op == "metrics":
            return json_reply(metrics=self.metrics_snapshot().to_dict())
        if op == "samples":
            since = int(body.get("since", 0))
            all_rows = self.sampler.rows if self.sampler is not None else []
            return json_reply(columns=list(CSV_COLUMNS), total=len(all_rows), rows=all_rows[since:])
        if op == "table":
            return json_reply(subscriptions=self.table.dump())
        if op == "ping":
            return json_reply()
        return json_reply(False, error="unknown-op")

    def _forget(self, conn: Connection) -> None:
        if conn.subscriber_id is not None and self.subscribers.get(conn.subscriber_id) is conn:
            del self.subscribers[conn.subscriber_id]
        self.counters.undeliverable += len(conn.pending)
        conn.pending.clear()
        self._paused.pop(conn, None)

    # -- routing and delivery ------------------------------------------------

    async def _route_loop(self) -> None:
        q = self.ingress
        c = self.counters
        secure = self._secure
        table = self.table
        subs = self.subscribers
        reseal = self.cfg.key_mode == "broker"
        while True:
            if not q:
                self._wake.clear()
                await self._wake.wait()
                continue
            touched = {}
            for _ in range(min(self.cfg.batch, len(q))):
                t0, header, frame, hlen = q.popleft()
                if secure is not None:
                    ids = secure.route(header, frame[:hlen])
                else:
                    ids = table.route(header)
                if not ids:
                    continue
                if reseal and header.enc is EncryptionMode.COUNTER:
                    frame = await self._reseal(header, frame[hlen:])
                    if frame is None:
                        continue
                for sid in ids:
                    conn = subs.get(sid)
                    if conn is None:
                        c.undeliverable += 1
                        continue
                    conn.pending.append((t0, frame))
                    touched[conn] = None
            for conn in touched:
                self._flush(conn)
            if self._paused:
                self._resume_paused()
            await asyncio.sleep(0)

    def _flush(self, conn: Connection) -> None:
        pending = conn.pending
        if not pending:
            return
        if conn.closed:
            self.counters.undeliverable += len(pending)
            pending.clear()
            return
        if len(pending) > self.cfg.subscriber_buffer:
            log.warning("subscriber %s overflowed its buffer; disconnecting", conn.subscriber_id)
            self.counters.disconnects += 1
            self.counters.undeliverable += len(pending)
            pending.clear()
            conn.closed = True
            conn.transport.abort()
            return
        if not conn.writable:
            return
        now = time.monotonic_ns()
        hist = self.counters.latency
        frames = []
        for t0, frame in pending:
            hist.record((now - t0) // 1000)
            frames.append(frame)
        pending.clear()
        conn.transport.write(b"".join(frames))
        self.counters.delivered += len(frames)

    async def _reseal(self, header: MessageHeader, payload: bytes) -> bytes | None:
        """Broker-held key mode: open with the publisher's key, reseal under
        the dissemination key handed to attested consumers."""
        from ..aggregator import decode_record

        key = self._publisher_keys.get((header.publisher_id, header.key_epoch))
        if key is None:
            loop = asyncio.get_running_loop()
            try:
                await loop.run_in_executor(None, self._attested.fetch, [header.publisher_id])
            except Exception as exc:
                log.warning("key fetch failed: %s", exc)
            key = self._attested.epochs.get((header.publisher_id, header.key_epoch))
            if key is None:
                self.counters.rejected += 1
                return None
            self._publisher_keys[(header.publisher_id, key.key_id)] = key
        plain = open_counter_payload(key, header.publisher_id, payload)
        try:
            decode_record(plain)
        except ValueError:
            self.counters.rejected += 1
            return None
        seq32 = int.from_bytes(payload[:4], "little")
        d = self._dissemination
        new_payload = seal_counter_payload(d, header.publisher_id, seq32, plain)
        return encode_publication(
            Publication.build(header.topic, header.privacy, header.enc, header.publisher_id, new_payload, d.key_id)
        )


class BrokerThread:
    """Run a broker on its own event loop in a background thread."""

    def __init__(self, cfg: BrokerConfig | None = None):
        cfg = cfg or BrokerConfig(port=0)
        self.broker = Broker(cfg)
        self._ready = threading.Event()
        self._loop: asyncio.AbstractEventLoop | None = None
        self._error: BaseException | None = None
        self._thread = threading.Thread(target=self._run, name="broker", daemon=True)

    def _run(self) -> None:
        self._loop = asyncio.new_event_loop()
        try:
            self._loop.run_until_complete(self.broker.serve(self._ready))
        except BaseException as exc:  # surfaced by start()
            self._error = exc
            self._ready.set()
        finally:
            self._loop.close()

    def start(self) -> BrokerThread:
        self._thread.start()
        self._ready.wait(10)
        if self._error is not None:
            raise self._error
        return self

    @property
    def address(self) -> tuple[str, int]:
        return self.broker.address

    def call(self, fn, *args):
        """Run ``fn`` on the broker loop and return its result."""
        fut = asyncio.run_coroutine_threadsafe(_as_coro(fn, *args), self._loop)
        return fut.result(10)

    def stop(self) -> None:
        if self._loop is not None and self._thread.is_alive():
            self._loop.call_soon_threadsafe(self.broker.request_stop)
            self._thread.join(10)

    def __enter__(self) -> BrokerThread:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


async def _as_coro(fn, *args):
    return fn(*args)
