"""Meter Data Collector: the trusted stage that encrypts raw measurements.

It holds the meter's DataKey, seals every reading at High sensitivity and
hands framed bytes to the Dispatcher over a length-prefixed socket.
"""
from __future__ import annotations

import logging
import socket
from typing import Callable

from ..crypto import DataKey, seal_counter_payload
from ..envelope import EncryptionMode, Measurement, PrivacyLevel, Publication, encode_publication
from ..wire import connect, pack_prefixed

log = logging.getLogger(__name__)

DEFAULT_TOPIC = "meter"
ROTATE_EVERY = 1 << 20


def mdc_process(m: Measurement, dk: DataKey, topic: str = DEFAULT_TOPIC) -> Publication:
    payload = seal_counter_payload(dk, m.meter_id, m.seq, m.to_bytes())
    return Publication.build(topic, PrivacyLevel.HIGH, EncryptionMode.COUNTER, m.meter_id, payload, dk.key_id)


def plaintext_process(m: Measurement, topic: str = DEFAULT_TOPIC) -> Publication:
    """Unprotected path used by the regular (non-secure) baseline."""
    return Publication.build(topic, PrivacyLevel.LOW, EncryptionMode.PLAINTEXT, m.meter_id, m.to_bytes())


class MDC:
    """Seals measurements and rotates the data key every ``rotate_every``
    publications; ``on_rotate`` is where the new key gets deposited."""

    def __init__(
        self,
        dk: DataKey,
        topic: str = DEFAULT_TOPIC,
        rotate_every: int = ROTATE_EVERY,
        on_rotate: Callable[[DataKey], None] | None = None,
    ):
        if rotate_every < 1:
            raise ValueError("rotate_every must be >= 1")
        self.dk = dk
        self.topic = topic
        self.rotate_every = rotate_every
        self.on_rotate = on_rotate
        self._used = 0

    def rotate(self) -> DataKey:
        new = self.dk.rotate()
        # Deposit before first use so consumers can fetch it on demand.
        if self.on_rotate is not None:
            self.on_rotate(new)
        self.dk = new
        self._used = 0
        log.info("rotated data key to epoch %d", new.key_id)
        return new

    def process(self, m: Measurement) -> Publication:
        if self._used >= self.rotate_every:
            self.rotate()
        self._used += 1
        return mdc_process(m, self.dk, self.topic)


class DispatcherLink:
    """MDC side of the MDC -> Dispatcher socket."""

    def __init__(self, addr, retries: int = 20):
        self.sock: socket.socket = connect(addr, timeout=None, retries=retries)
        self.sent = 0

    def send(self, pub: Publication) -> None:
        self.send_frames([encode_publication(pub)])

    def send_frames(self, frames: list[bytes]) -> None:
        self.sock.sendall(pack_prefixed(frames))
        self.sent += len(frames)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        self.sock.close()

    def __enter__(self) -> DispatcherLink:
        return self

    def __exit__(self, *exc) -> None:
        self.close()
