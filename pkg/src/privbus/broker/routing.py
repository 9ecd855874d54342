"""Routing table: publisher keys, authorized subscriptions and the match index."""
from __future__ import annotations

import hashlib
import time

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

from ..envelope import MessageHeader, PrivacyLevel, Subscription


class RoutingError(Exception):
    code = "routing-error"


class DuplicatePublisher(RoutingError):
    code = "duplicate-id"


class UnknownPublisher(RoutingError):
    code = "unknown-publisher"


class BadAuthorization(RoutingError):
    code = "bad-authorization"


class RoutingTable:
    """Subscriptions indexed by publisher, topic filter and level.

    ``route`` must agree with filtering the stored subscriptions through
    :func:`privbus.envelope.match_header`; the index only avoids the scan.
    """

    def __init__(self) -> None:
        self.publisher_keys: dict[int, Ed25519PublicKey] = {}
        self.by_publisher: dict[int, list[Subscription]] = {}
        self._seen: set[tuple] = set()
        self._index: dict[int, dict[str, dict[PrivacyLevel, set[int]]]] = {}
        self._cache: dict[tuple[int, str, PrivacyLevel], tuple[int, ...]] = {}

    def register_publisher(self, publisher_id: int, verification_key: Ed25519PublicKey) -> None:
        if publisher_id in self.publisher_keys:
            raise DuplicatePublisher(f"publisher {publisher_id} already registered")
        self.publisher_keys[publisher_id] = verification_key
        self.by_publisher.setdefault(publisher_id, [])

    def is_registered(self, publisher_id: int) -> bool:
        return publisher_id in self.publisher_keys

    def submit(self, s: Subscription) -> bool:
        """Store a publisher-signed subscription. Returns False if it was already present."""
        key = self.publisher_keys.get(s.publisher_id)
        if key is None:
            raise UnknownPublisher(f"publisher {s.publisher_id} is not registered")
        if not s.verify(key):
            raise BadAuthorization("subscription is not signed by its publisher")
        if s.key in self._seen:
            return False
        self._seen.add(s.key)
        self.by_publisher[s.publisher_id].append(s)
        by_filter = self._index.setdefault(s.publisher_id, {})
        by_level = by_filter.setdefault(s.topic_filter, {})
        for lvl in s.levels:
            by_level.setdefault(lvl, set()).add(s.subscriber_id)
        self._cache.clear()
        return True

    def route(self, h: MessageHeader) -> tuple[int, ...]:
        """Subscriber ids whose subscriptions match ``h``."""
        ck = (h.publisher_id, h.topic, h.privacy)
        hit = self._cache.get(ck)
        if hit is not None:
            return hit
        out: set[int] = set()
        by_filter = self._index.get(h.publisher_id)
        if by_filter:
            for f in ("*", h.topic):
                by_level = by_filter.get(f)
                if by_level:
                    ids = by_level.get(h.privacy)
                    if ids:
                        out |= ids
        result = tuple(sorted(out))
        if len(self._cache) > 4096:
            self._cache.clear()
        self._cache[ck] = result
        return result

    def dump(self) -> list[dict]:
        return [s.to_dict() for subs in self.by_publisher.values() for s in subs]

    def __len__(self) -> int:
        return len(self._seen)


class SecureMatcher:
    """Routing through the attested engine path.

    There is no real enclave: the header crosses a simulated boundary (it
    is hashed, standing in for the copy-and-check into protected memory)
    and an optional fixed per-message overhead is spent before matching.
    Results are identical to the plain table.
    """

    def __init__(self, table: RoutingTable, overhead_us: float = 0.0):
        self.table = table
        self.overhead_ns = int(overhead_us * 1000)
        self.boundary_digest = hashlib.sha256()

    def route(self, h: MessageHeader, header_bytes: bytes = b"") -> tuple[int, ...]:
        hashlib.sha256(header_bytes).digest()
        if self.overhead_ns:
            end = time.perf_counter_ns() + self.overhead_ns
            while time.perf_counter_ns() < end:
                pass
        return self.table.route(h)
