"""Untrusted gateway between the MDC and the broker.

It relays bytes and nothing else: this module deliberately imports no key
material types. Upstream framing is a u32 length prefix per envelope frame;
downstream the envelope frames are written verbatim.
"""
from __future__ import annotations

import logging
import socket
import threading
from typing import Callable

from ..wire import connect, split_prefixed

log = logging.getLogger(__name__)


class DispatchError(ConnectionError):
    pass


class Dispatcher:
    def __init__(
        self,
        broker_addr,
        listen: tuple[str, int] = ("127.0.0.1", 0),
        retries: int = 5,
        backoff: float = 0.05,
        tap: Callable[[bytes], None] | None = None,
    ):
        self.broker_addr = broker_addr
        self.retries = retries
        self.backoff = backoff
        self.tap = tap
        self.forwarded = 0
        self.errors: list[str] = []
        self._lock = threading.Lock()
        self._listener = socket.create_server(listen)
        self.address = self._listener.getsockname()[:2]
        self._stop = threading.Event()
        self._downstream: socket.socket | None = None

    def _open_downstream(self) -> socket.socket:
        try:
            return connect(self.broker_addr, retries=self.retries, backoff=self.backoff, timeout=None)
        except OSError as exc:
            raise DispatchError(f"broker unreachable after {self.retries} retries: {exc}") from exc

    def dispatch(self, frame: bytes) -> None:
        """Forward one envelope frame unmodified (blocks under back-pressure)."""
        with self._lock:
            if self._downstream is None:
                self._downstream = self._open_downstream()
            if self.tap:
                self.tap(frame)
            self._downstream.sendall(frame)
            self.forwarded += 1

    def _relay(self, upstream: socket.socket) -> None:
        try:
            down = self._open_downstream()
        except DispatchError as exc:
            self.errors.append(str(exc))
            log.error("%s", exc)
            upstream.close()
            return
        buf = bytearray()
        try:
            while not self._stop.is_set():
                data = upstream.recv(1 << 18)
                if not data:
                    break
                if self.tap:
                    self.tap(data)
                buf += data
                frames = split_prefixed(buf)
                if frames:
                    # sendall blocks while the broker is not reading, which in
                    # turn stops us reading upstream: back-pressure propagates.
                    down.sendall(b"".join(frames))
                    self.forwarded += len(frames)
        except OSError as exc:
            self.errors.append(str(exc))
        finally:
            upstream.close()
            down.close()

    def serve_forever(self) -> None:
        self._listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                up, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            up.settimeout(None)
            threading.Thread(target=self._relay, args=(up,), daemon=True).start()

    def start(self) -> Dispatcher:
        threading.Thread(target=self.serve_forever, name="dispatcher", daemon=True).start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._listener.close()
        if self._downstream is not None:
            self._downstream.close()
