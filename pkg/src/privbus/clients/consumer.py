"""Consumer endpoint: attest, get subscriptions authorized, decode deliveries.

A reader thread drains the socket and timestamps each chunk on arrival, so
decode cost does not inflate measured latency or back up the broker.
"""
from __future__ import annotations

import csv
import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Iterator

from ..aggregator import AggregateRecord, Record, decode_record
from ..attestation import PUBLIC_LEVELS, Platform, Role
from ..attestor import AttestedSession, attest
from ..broker.client import BrokerClient
from ..crypto import CodeIdentity, DataKey, open_counter_payload
from ..envelope import EncryptionMode, FrameBuffer, Measurement, MessageHeader, PrivacyLevel, RecordError
from .authorizer import AuthorizationDenied, request_subscription

log = logging.getLogger(__name__)

CSV_COLUMNS = ("recv_ts_us", "meter_id", "ts_ms", "value_mw", "seq", "latency_us")


@dataclass
class ConsumerConfig:
    subscriber_id: int
    broker: object
    # publisher_id -> address of that publisher's authorization endpoint
    publishers: dict[int, object] = field(default_factory=dict)
    levels: frozenset[PrivacyLevel] = PUBLIC_LEVELS
    topic_filter: str = "*"
    attestor: object | None = None
    platform: Platform | None = None
    code: CodeIdentity | None = None
    role: Role = Role.CONSUMER
    auto_refresh: bool = True
    refresh_interval_s: float = 0.2


@dataclass(frozen=True)
class Delivery:
    recv_ns: int
    header: MessageHeader
    record: Record


@dataclass
class ConsumerStats:
    decoded: int = 0
    decode_failures: int = 0
    out_of_order: int = 0
    denied: list = field(default_factory=list)


class Consumer:
    def __init__(self, cfg: ConsumerConfig):
        self.cfg = cfg
        self.session: AttestedSession | None = None
        self.keys: dict[tuple[int, int], DataKey] = {}
        self.stats = ConsumerStats()
        self.last_seq: dict[int, int] = {}
        self.subscriptions = []
        self._chunks: queue.Queue = queue.Queue()
        self._frames = FrameBuffer()
        self._chunk_ns = 0
        self.eof = False
        self._last_refresh = 0.0
        self._data: BrokerClient | None = None
        self._reader: threading.Thread | None = None

    # -- setup ---------------------------------------------------------------

    def needs_attestation(self) -> bool:
        return not self.cfg.levels <= PUBLIC_LEVELS

    def attest(self) -> AttestedSession:
        cfg = self.cfg
        if cfg.attestor is None or cfg.platform is None or cfg.code is None:
            raise AuthorizationDenied("attestation requires an attestor, a platform key and a code identity")
        self.session = attest(cfg.attestor, cfg.platform, cfg.code, cfg.role, cfg.subscriber_id, list(cfg.publishers))
        self.keys.update(self.session.epochs)
        return self.session

    def refresh_keys(self) -> int:
        """Fetch current keys re-wrapped under the existing session."""
        if self.session is None:
            return 0
        got = self.session.fetch(list(self.cfg.publishers))
        self.keys.update(self.session.epochs)
        self._last_refresh = time.monotonic()
        return len(got)

    def attach(self) -> None:
        self._data = BrokerClient(self.cfg.broker, timeout=10.0)
        self._data.attach(self.cfg.subscriber_id)
        sock = self._data.conn.sock
        sock.settimeout(None)
        # Bytes already buffered by the reply reader belong to the stream.
        leftover = self._data.conn.detach_buffered()
        if leftover:
            self._chunks.put((time.time_ns(), leftover))
        self._reader = threading.Thread(target=self._read, args=(sock,), name="consumer-reader", daemon=True)
        self._reader.start()

    def subscribe(self, levels=None, publishers=None) -> list:
        """Ask each publisher to authorize us; denials are recorded, not raised."""
        levels = frozenset(levels or self.cfg.levels)
        token = self.session.token if self.session is not None else None
        got = []
        for pid, addr in (publishers or self.cfg.publishers).items():
            try:
                got.append(request_subscription(addr, self.cfg.subscriber_id, levels, self.cfg.topic_filter, token))
            except AuthorizationDenied as exc:
                log.info("publisher %s denied subscription: %s", pid, exc)
                self.stats.denied.append((pid, str(exc)))
        self.subscriptions.extend(got)
        return got

    def start(self) -> Consumer:
        if self.needs_attestation():
            self.attest()
        self.attach()
        self.subscribe()
        return self

    # -- data path -----------------------------------------------------------

    def _read(self, sock: socket.socket) -> None:
        put = self._chunks.put
        while True:
            try:
                data = sock.recv(1 << 18)
            except OSError:
                data = b""
            if not data:
                put(None)
                return
            put((time.time_ns(), data))

    def _key_for(self, h: MessageHeader) -> DataKey | None:
        dk = self.keys.get((h.publisher_id, h.key_epoch))
        if dk is None and self.cfg.auto_refresh and self.session is not None:
            if time.monotonic() - self._last_refresh >= self.cfg.refresh_interval_s:
                try:
                    self.refresh_keys()
                except Exception as exc:  # keep consuming; failures are counted
                    log.warning("key refresh failed: %s", exc)
                dk = self.keys.get((h.publisher_id, h.key_epoch))
        return dk

    def decode(self, h: MessageHeader, payload: bytes) -> Record | None:
        try:
            if h.enc is EncryptionMode.PLAINTEXT:
                rec = decode_record(payload)
            else:
                dk = self._key_for(h)
                if dk is None:
                    raise RecordError(f"no key for publisher {h.publisher_id} epoch {h.key_epoch}")
                rec = decode_record(open_counter_payload(dk, h.publisher_id, payload))
        except ValueError:
            self.stats.decode_failures += 1
            return None
        self.stats.decoded += 1
        if isinstance(rec, Measurement):
            prev = self.last_seq.get(rec.meter_id)
            if prev is not None and rec.seq <= prev:
                self.stats.out_of_order += 1
            self.last_seq[rec.meter_id] = rec.seq
        return rec

    def deliveries(self, timeout: float | None = None, idle: float | None = None) -> Iterator[Delivery]:
        """Yield decoded deliveries until ``timeout`` elapses overall, no data
        arrives for ``idle`` seconds, or the broker closes the connection."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            # Frames left over from an earlier, abandoned iteration go first.
            for header, _, payload in self._frames.frames():
                rec = self.decode(header, payload)
                if rec is not None:
                    yield Delivery(self._chunk_ns, header, rec)
            if self.eof:
                return
            wait = idle
            if deadline is not None:
                left = deadline - time.monotonic()
                if left <= 0:
                    return
                wait = left if wait is None else min(wait, left)
            try:
                item = self._chunks.get(timeout=wait)
            except queue.Empty:
                return
            if item is None:
                self.eof = True
                return
            self._chunk_ns, data = item
            self._frames.feed(data)

    def collect(self, n: int, timeout: float) -> list[Delivery]:
        out = []
        if n <= 0:
            return out
        for d in self.deliveries(timeout=timeout):
            out.append(d)
            if len(out) >= n:
                break
        return out

    def close(self) -> None:
        if self._data is not None:
            self._data.close()
        if self.session is not None:
            self.session.close()


def consumer_run(cfg: ConsumerConfig, timeout: float | None = None, idle: float | None = None) -> Iterator[Delivery]:
    c = Consumer(cfg).start()
    try:
        yield from c.deliveries(timeout=timeout, idle=idle)
    finally:
        c.close()


def delivery_row(d: Delivery) -> tuple | None:
    rec = d.record
    if not isinstance(rec, Measurement):
        return None
    recv_us = d.recv_ns // 1000
    return (recv_us, rec.meter_id, rec.timestamp_ms, rec.value_mw, rec.seq, recv_us - rec.timestamp_ms * 1000)


def write_csv(path, deliveries) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for d in deliveries:
            row = delivery_row(d)
            if row is not None:
                w.writerow(row)
                n += 1
    return n


__all__ = [
    "AggregateRecord",
    "Consumer",
    "ConsumerConfig",
    "ConsumerStats",
    "Delivery",
    "consumer_run",
    "write_csv",
]
