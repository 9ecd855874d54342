"""Publisher-side subscription authorization endpoint.

The broker only stores subscriptions signed by the publisher, so a
candidate consumer first asks the publisher. Requests above Low must carry
a grant token signed by the Attestor for the same subscriber id and
covering every requested level; Low-only requests are authorized without
attestation.
"""
from __future__ import annotations

import json
import logging
import socketserver
import threading

from ..attestation import GrantToken, PUBLIC_LEVELS
from ..broker.client import BrokerClient
from ..crypto import verify_key_from_bytes
from ..envelope import PrivacyLevel, Subscription
from ..wire import AUTH_TOPIC, FrameSocket, RemoteError, json_reply

log = logging.getLogger(__name__)


class AuthorizationDenied(PermissionError):
    pass


class Authorizer:
    def __init__(
        self,
        publisher_id: int,
        signing_key,
        broker: BrokerClient,
        attestor_grant_public: bytes | None,
        token_max_age_ms: int | None = 300_000,
    ):
        self.publisher_id = publisher_id
        self.signing_key = signing_key
        self.broker = broker
        self.grant_key = verify_key_from_bytes(attestor_grant_public) if attestor_grant_public else None
        self.token_max_age_ms = token_max_age_ms
        self.authorized: list[Subscription] = []
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)

    def decide(self, subscriber_id: int, levels: frozenset[PrivacyLevel], token: GrantToken | None) -> None:
        if levels <= PUBLIC_LEVELS:
            return
        if token is None or self.grant_key is None:
            raise AuthorizationDenied("attestation required for levels above Low")
        if not token.verify(self.grant_key, self.token_max_age_ms):
            raise AuthorizationDenied("grant token signature invalid or expired")
        if token.subscriber_id != subscriber_id:
            raise AuthorizationDenied("grant token issued to another subscriber")
        if not levels <= token.levels:
            raise AuthorizationDenied("requested levels exceed the attested grant")

    def authorize(
        self, subscriber_id: int, levels, topic_filter: str = "*", token: GrantToken | None = None
    ) -> Subscription:
        levels = frozenset(PrivacyLevel(x) for x in levels)
        self.decide(subscriber_id, levels, token)
        sub = Subscription(subscriber_id, self.publisher_id, topic_filter, levels).authorize(self.signing_key)
        with self._lock:
            self.broker.subscribe(sub)
            self.authorized.append(sub)
            self._changed.notify_all()
        return sub

    def wait_for(self, count: int, timeout: float | None = None) -> bool:
        with self._lock:
            return self._changed.wait_for(lambda: len(self.authorized) >= count, timeout)

    def handle(self, body: dict) -> dict:
        if body.get("op") != "subscribe":
            return json_reply(False, error="unknown-op")
        try:
            token = GrantToken.from_dict(body["token"]) if body.get("token") else None
            levels = [PrivacyLevel.parse(x) for x in body["levels"]]
            sub = self.authorize(int(body["subscriber_id"]), levels, body.get("topic_filter", "*"), token)
        except AuthorizationDenied as exc:
            log.info("denied subscriber %s: %s", body.get("subscriber_id"), exc)
            return json_reply(False, error="denied", detail=str(exc))
        except RemoteError as exc:
            return json_reply(False, error=exc.error)
        except (KeyError, ValueError) as exc:
            return json_reply(False, error="bad-request", detail=str(exc))
        return json_reply(subscription=sub.to_dict())


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        conn = FrameSocket(self.request)
        while True:
            try:
                header, _, payload = conn.recv_frame()
                body = json.loads(payload)
            except (ConnectionError, OSError, ValueError):
                return
            try:
                conn.reply(AUTH_TOPIC, self.server.authorizer.handle(body))
            except OSError:
                return


class AuthorizerServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, authorizer: Authorizer, addr=("127.0.0.1", 0)):
        self.authorizer = authorizer
        super().__init__(addr, _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> AuthorizerServer:
        threading.Thread(target=self.serve_forever, name="authorizer", daemon=True).start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def request_subscription(
    addr, subscriber_id: int, levels, topic_filter: str = "*", token: GrantToken | None = None, retries: int = 20
) -> Subscription:
    """Ask a publisher to authorize a subscription on our behalf."""
    body = {
        "op": "subscribe",
        "subscriber_id": subscriber_id,
        "levels": [PrivacyLevel(x).name.lower() for x in levels],
        "topic_filter": topic_filter,
        "token": token.to_dict() if token else None,
    }
    with FrameSocket.open(addr, retries=retries) as conn:
        try:
            reply = conn.request(AUTH_TOPIC, body)
        except RemoteError as exc:
            raise AuthorizationDenied(exc.reply.get("detail") or exc.error) from None
    return Subscription.from_dict(reply["subscription"])
