"""Publisher-side runtime: meter -> MDC -> Dispatcher -> broker.

Also hosts the publisher's authorization endpoint, since only the
publisher may sign subscriptions to its stream.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from ..attestation import Platform, Role
from ..attestor import AttestedSession, attest, attestor_info
from ..broker.client import BrokerClient
from ..crypto import DataKey, new_signing_key
from ..envelope import Publication, encode_publication
from ..identity import role_code
from .authorizer import Authorizer, AuthorizerServer
from .dispatcher import Dispatcher
from .mdc import DEFAULT_TOPIC, MDC, ROTATE_EVERY, DispatcherLink, plaintext_process
from .meter import Constant, Meter, MeterConfig, ValueModel, paced

log = logging.getLogger(__name__)

MODE_SECURE = "secure"
MODE_REGULAR = "regular"


@dataclass
class ProducerConfig:
    meter_id: int
    broker: object
    rate_hz: float = 1.0
    mode: str = MODE_SECURE
    attestor: object | None = None
    platform: Platform | None = None
    dispatcher: object | None = None
    auth_listen: tuple[str, int] = ("127.0.0.1", 0)
    value_model: ValueModel = field(default_factory=lambda: Constant(1000))
    rotate_every: int = ROTATE_EVERY
    topic: str = DEFAULT_TOPIC

    def __post_init__(self) -> None:
        if self.mode not in (MODE_SECURE, MODE_REGULAR):
            raise ValueError(f"mode must be secure or regular, not {self.mode!r}")
        if self.mode == MODE_SECURE and (self.attestor is None or self.platform is None):
            raise ValueError("secure mode needs an attestor address and a platform key")


class Producer:
    def __init__(self, cfg: ProducerConfig):
        self.cfg = cfg
        self.meter = Meter(MeterConfig(cfg.meter_id, cfg.rate_hz, cfg.value_model))
        self.signing_key = new_signing_key()
        self.session: AttestedSession | None = None
        self.mdc: MDC | None = None
        self.dispatcher: Dispatcher | None = None
        self.link: DispatcherLink | None = None
        self.control: BrokerClient | None = None
        self.authorizer: Authorizer | None = None
        self.auth_server: AuthorizerServer | None = None

    @property
    def auth_address(self) -> tuple[str, int]:
        return self.auth_server.address

    def _deposit(self, dk: DataKey) -> None:
        self.session.deposit(self.cfg.meter_id, dk)

    def start(self) -> Producer:
        cfg = self.cfg
        self.control = BrokerClient(cfg.broker)
        self.control.register(cfg.meter_id, self.signing_key)
        grant_public = None
        if cfg.mode == MODE_SECURE:
            self.session = attest(cfg.attestor, cfg.platform, role_code(Role.PRODUCER), Role.PRODUCER)
            dk = DataKey.generate(0)
            self._deposit(dk)
            self.mdc = MDC(dk, cfg.topic, cfg.rotate_every, on_rotate=self._deposit)
            grant_public = bytes.fromhex(attestor_info(cfg.attestor)["grant_public"])
        self.authorizer = Authorizer(cfg.meter_id, self.signing_key, self.control, grant_public)
        self.auth_server = AuthorizerServer(self.authorizer, cfg.auth_listen).start()
        target = cfg.dispatcher
        if target is None:
            self.dispatcher = Dispatcher(cfg.broker).start()
            target = self.dispatcher.address
        self.link = DispatcherLink(target)
        return self

    def publication(self, now_ms: int | None = None) -> Publication:
        m = self.meter.tick(now_ms)
        if self.mdc is not None:
            return self.mdc.process(m)
        return plaintext_process(m, self.cfg.topic)

    def publish(self, pub: Publication) -> None:
        self.link.send_frames([encode_publication(pub)])

    def run(self, count: int) -> int:
        """Publish ``count`` measurements paced at the configured rate."""
        sent = 0
        for m in paced(self.meter, count):
            pub = self.mdc.process(m) if self.mdc is not None else plaintext_process(m, self.cfg.topic)
            self.publish(pub)
            sent += 1
        return sent

    def close(self) -> None:
        if self.link is not None:
            self.link.close()
        # Let the relay drain what we handed it before tearing it down.
        if self.dispatcher is not None:
            deadline = time.monotonic() + 5
            while self.dispatcher.forwarded < self.link.sent and time.monotonic() < deadline:
                time.sleep(0.01)
            self.dispatcher.stop()
        if self.auth_server is not None:
            self.auth_server.stop()
        if self.session is not None:
            self.session.close()
        if self.control is not None:
            self.control.close()

    def __enter__(self) -> Producer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()
