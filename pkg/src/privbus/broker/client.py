"""Blocking clients for the broker's control and data connections.

Use one connection for control requests and a separate one for receiving
deliveries; replies and deliveries are not multiplexed.
"""
from __future__ import annotations

from ..crypto import public_bytes
from ..envelope import Publication, Subscription, decode_publication, encode_publication
from ..wire import CTL_TOPIC, FrameSocket, RemoteError, sign_body


class BrokerClient:
    def __init__(self, addr, retries: int = 20, timeout: float | None = 10.0):
        self.addr = addr
        self.conn = FrameSocket.open(addr, timeout=timeout, retries=retries)

    def request(self, body: dict) -> dict:
        return self.conn.request(CTL_TOPIC, body)

    def register(self, publisher_id: int, signing_key) -> PublisherStream:
        body = sign_body(
            {"op": "register", "publisher_id": publisher_id, "verify_key": public_bytes(signing_key).hex()}, signing_key
        )
        self.request(body)
        return PublisherStream(self, publisher_id)

    def subscribe(self, s: Subscription) -> bool:
        return bool(self.request({"op": "subscribe", "subscription": s.to_dict()}).get("stored"))

    def attach(self, subscriber_id: int) -> None:
        self.request({"op": "attach", "subscriber_id": subscriber_id})

    def metrics(self) -> dict:
        return self.request({"op": "metrics"})["metrics"]

    def table(self) -> list[dict]:
        return self.request({"op": "table"})["subscriptions"]

    def samples(self, since: int = 0) -> tuple[list[str], list[list], int]:
        """Sampler rows from index ``since`` on, plus the total row count."""
        reply = self.request({"op": "samples", "since": since})
        return reply["columns"], reply["rows"], reply["total"]

    def ping(self) -> None:
        self.request({"op": "ping"})

    def publish(self, pub: Publication) -> None:
        self.conn.send(encode_publication(pub))

    def send_raw(self, frames: bytes) -> None:
        self.conn.send(frames)

    def recv_publication(self) -> Publication:
        _, frame, _ = self.conn.recv_frame()
        return decode_publication(frame)

    def close(self) -> None:
        self.conn.close()

    def __enter__(self) -> BrokerClient:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class PublisherStream:
    """Handle returned by registration; publishes on the registering connection."""

    def __init__(self, client: BrokerClient, publisher_id: int):
        self.client = client
        self.publisher_id = publisher_id

    def publish(self, pub: Publication) -> None:
        if pub.header.publisher_id != self.publisher_id:
            raise ValueError("publication belongs to another publisher")
        self.client.publish(pub)


__all__ = ["BrokerClient", "PublisherStream", "RemoteError"]
