"""Networked aggregator: an attested High-level subscriber that is also a
publisher of its own Moderate and Low streams."""
from __future__ import annotations

import logging
import threading
import time

from .aggregator import AggregateRecord, Aggregator, AggregatorConfig, Republisher
from .attestation import Platform, Role
from .attestor import attestor_info
from .broker.client import BrokerClient
from .clients.authorizer import Authorizer, AuthorizerServer
from .clients.consumer import Consumer, ConsumerConfig
from .crypto import DataKey, new_signing_key
from .envelope import Measurement, PrivacyLevel, encode_publication
from .identity import role_code

log = logging.getLogger(__name__)


class AggregatorService:
    def __init__(
        self,
        publisher_id: int,
        broker,
        attestor,
        platform: Platform,
        meters: dict[int, object],
        cfg: AggregatorConfig | None = None,
        subscriber_id: int | None = None,
        auth_listen: tuple[str, int] = ("127.0.0.1", 0),
        topic: str = "aggregate",
    ):
        self.publisher_id = publisher_id
        self.broker = broker
        self.attestor = attestor
        self.platform = platform
        self.meters = dict(meters)
        self.aggregator = Aggregator(cfg)
        self.subscriber_id = publisher_id if subscriber_id is None else subscriber_id
        self.auth_listen = auth_listen
        self.topic = topic
        self.signing_key = new_signing_key()
        self.published: list[AggregateRecord] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> AggregatorService:
        self.consumer = Consumer(
            ConsumerConfig(
                self.subscriber_id,
                self.broker,
                self.meters,
                frozenset({PrivacyLevel.HIGH}),
                attestor=self.attestor,
                platform=self.platform,
                code=role_code(Role.AGGREGATOR),
                role=Role.AGGREGATOR,
            )
        ).start()
        if self.consumer.stats.denied:
            raise PermissionError(f"meters declined the aggregator: {self.consumer.stats.denied}")
        self.control = BrokerClient(self.broker)
        self.control.register(self.publisher_id, self.signing_key)
        dk = DataKey.generate(0)
        self.consumer.session.deposit(self.publisher_id, dk)
        self.republisher = Republisher(self.publisher_id, dk, self.topic)
        grant_public = bytes.fromhex(attestor_info(self.attestor)["grant_public"])
        self.authorizer = Authorizer(self.publisher_id, self.signing_key, self.control, grant_public)
        self.auth_server = AuthorizerServer(self.authorizer, self.auth_listen).start()
        return self

    @property
    def auth_address(self) -> tuple[str, int]:
        return self.auth_server.address

    def emit(self, records: list[AggregateRecord]) -> None:
        if not records:
            return
        frames = [encode_publication(self.republisher.republish(r)) for r in records]
        self.control.send_raw(b"".join(frames))
        self.published.extend(records)

    def step(self, slice_s: float = 0.1, now_ms: int | None = None) -> None:
        for d in self.consumer.deliveries(timeout=slice_s):
            if isinstance(d.record, Measurement):
                self.aggregator.ingest(d.record)
        self.emit(self.aggregator.poll(now_ms))

    def run(self, duration_s: float | None = None) -> None:
        deadline = None if duration_s is None else time.monotonic() + duration_s
        while not self._stop.is_set() and (deadline is None or time.monotonic() < deadline):
            self.step()

    def run_in_thread(self) -> AggregatorService:
        self._thread = threading.Thread(target=self.run, name="aggregator", daemon=True)
        self._thread.start()
        return self

    def stop(self, flush: bool = False) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(5)
        if flush:
            self.emit(self.aggregator.flush())
        self.auth_server.stop()
        self.consumer.close()
        self.control.close()
