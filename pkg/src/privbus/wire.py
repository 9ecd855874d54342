"""Blocking socket helpers and the JSON control messages carried in frames.

Control traffic (topic ``ctl`` to the broker, ``attest`` to the Attestor,
``auth`` to a publisher's authorization endpoint) is always Low/Plaintext
with a JSON body.
"""
from __future__ import annotations

import json
import socket
import struct
import time
from typing import Any

from .envelope import EncryptionMode, FrameBuffer, MessageHeader, PrivacyLevel, Publication, encode_publication

CTL_TOPIC = "ctl"
ATTEST_TOPIC = "attest"
AUTH_TOPIC = "auth"

_LEN = struct.Struct("<I")


class ConnectionClosed(ConnectionError):
    pass


class RemoteError(RuntimeError):
    """The peer answered a control request with ``ok: false``."""

    def __init__(self, error: str, reply: dict | None = None):
        super().__init__(error)
        self.error = error
        self.reply = reply or {}


def parse_addr(addr: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr
    host, _, port = addr.rpartition(":")
    return (host or "127.0.0.1", int(port))


def format_addr(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"


def canonical(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def control_publication(topic: str, body: dict) -> Publication:
    return Publication.build(topic, PrivacyLevel.LOW, EncryptionMode.PLAINTEXT, 0, canonical(body))


def control_frame(topic: str, body: dict) -> bytes:
    return encode_publication(control_publication(topic, body))


def sign_body(body: dict, signing_key) -> dict:
    signed = dict(body)
    signed.pop("sig", None)
    signed["sig"] = signing_key.sign(canonical(signed)).hex()
    return signed


def verify_body(body: dict, verification_key) -> bool:
    from cryptography.exceptions import InvalidSignature

    unsigned = dict(body)
    sig = unsigned.pop("sig", "")
    try:
        verification_key.verify(bytes.fromhex(sig), canonical(unsigned))
    except (InvalidSignature, ValueError):
        return False
    return True


def connect(addr, timeout: float | None = 10.0, retries: int = 0, backoff: float = 0.05) -> socket.socket:
    """Connect with bounded exponential backoff."""
    host, port = parse_addr(addr)
    delay = backoff
    for attempt in range(retries + 1):
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError:
            if attempt == retries:
                raise
            time.sleep(delay)
            delay = min(delay * 2, 2.0)
    raise AssertionError("unreachable")


class FrameSocket:
    """Blocking frame-oriented wrapper around a connected socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._buf = FrameBuffer()
        self._ready: list[tuple[MessageHeader, bytes, bytes]] = []

    @classmethod
    def open(cls, addr, timeout: float | None = 10.0, retries: int = 0) -> FrameSocket:
        return cls(connect(addr, timeout=timeout, retries=retries))

    def send(self, frame: bytes) -> None:
        self.sock.sendall(frame)

    def send_publication(self, pub: Publication) -> None:
        self.sock.sendall(encode_publication(pub))

    def recv_frame(self) -> tuple[MessageHeader, bytes, bytes]:
        while not self._ready:
            data = self.sock.recv(1 << 16)
            if not data:
                raise ConnectionClosed("peer closed connection")
            self._buf.feed(data)
            self._ready.extend(self._buf.frames())
        return self._ready.pop(0)

    def request(self, topic: str, body: dict) -> dict:
        """Send a control message and wait for its JSON reply."""
        self.send(control_frame(topic, body))
        return self.recv_json()

    def recv_json(self) -> dict:
        _, _, payload = self.recv_frame()
        reply = json.loads(payload)
        if not reply.get("ok", False):
            raise RemoteError(reply.get("error", "request failed"), reply)
        return reply

    def reply(self, topic: str, body: dict) -> None:
        self.send(control_frame(topic, body))

    def detach_buffered(self) -> bytes:
        """Hand over bytes received but not yet consumed, as raw frames."""
        data = b"".join(frame for _, frame, _ in self._ready) + self._buf.take()
        self._ready.clear()
        return data

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self) -> FrameSocket:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def send_prefixed(sock: socket.socket, data: bytes) -> None:
    sock.sendall(_LEN.pack(len(data)) + data)


def pack_prefixed(frames) -> bytes:
    return b"".join(_LEN.pack(len(f)) + f for f in frames)


def split_prefixed(buf: bytearray) -> list[bytes]:
    """Pop complete length-prefixed records from the front of ``buf``."""
    out = []
    pos = 0
    n = len(buf)
    while n - pos >= 4:
        (size,) = _LEN.unpack_from(buf, pos)
        if n - pos - 4 < size:
            break
        out.append(bytes(buf[pos + 4 : pos + 4 + size]))
        pos += 4 + size
    del buf[:pos]
    return out


def json_reply(ok: bool = True, **fields: Any) -> dict:
    return {"ok": ok, **fields}
