"""Attestor daemon (stand-in for the remote attestation service) and its client.

Wire protocol: envelope frames with topic ``attest`` and JSON bodies.

``challenge``  -> ``{nonce}``
``attest``     quote + key-agreement public value + requested publisher keys
               -> verdict, responder public value, wrapped keys, grant token
``deposit``    producer hands its data key to the Attestor (wrapped under
               the session) so attested consumers can be served
``fetch``      re-wrap current keys under the existing session (rotation)
"""
from __future__ import annotations

import json
import logging
import socketserver
import threading
import time
from dataclasses import dataclass, field

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from .attestation import (
    AttestationResult,
    GrantToken,
    Platform,
    Policy,
    Quote,
    RejectReason,
    ReplayCache,
    Role,
    establish_session,
    exchange_public,
    issue_data_key,
    new_exchange_key,
    new_nonce,
    verify_quote,
)
from .crypto import CodeIdentity, DataKey, KeyBundle, SessionKey, public_bytes, unwrap_key, wrap_key
from .envelope import PrivacyLevel, levels_from_mask, levels_mask
from .wire import ATTEST_TOPIC, FrameSocket, RemoteError, json_reply

log = logging.getLogger(__name__)

KEY_MODE_SOURCE = "source"
KEY_MODE_BROKER = "broker"
# In broker-held mode the broker's dissemination key is deposited under this id.
DISSEMINATION_ID = 0
# Epochs served per publisher, so a consumer that refreshes after several
# rotations can still open frames already in flight under older keys.
KEEP_EPOCHS = 4


@dataclass
class _Session:
    nonce: bytes | None = None
    nonce_issued: float = 0.0
    result: AttestationResult | None = None


class Attestor:
    """Verification policy, replay protection and data-key custody."""

    def __init__(
        self,
        policy: Policy,
        platform_keys: list[Ed25519PublicKey],
        grant_key: Ed25519PrivateKey,
        key_mode: str = KEY_MODE_SOURCE,
        replay_capacity: int = 1 << 16,
    ):
        if key_mode not in (KEY_MODE_SOURCE, KEY_MODE_BROKER):
            raise ValueError(f"unknown key mode {key_mode!r}")
        self.policy = policy
        self.platform_keys = list(platform_keys)
        self.grant_key = grant_key
        self.key_mode = key_mode
        self.replay = ReplayCache(replay_capacity)
        self._keys: dict[int, list[DataKey]] = {}
        self._lock = threading.Lock()
        self.stats = {"trusted": 0, "rejected": 0}

    @property
    def grant_public(self) -> bytes:
        return public_bytes(self.grant_key)

    def challenge(self, session: _Session) -> bytes:
        session.nonce = new_nonce()
        session.nonce_issued = time.monotonic()
        session.result = None
        return session.nonce

    def attest(self, session: _Session, quote: Quote, kex_public: bytes) -> AttestationResult:
        expected, issued = session.nonce, session.nonce_issued
        # A nonce answers exactly one quote.
        session.nonce = None
        if expected is None:
            result = AttestationResult.rejected(RejectReason.NONCE_MISMATCH, quote.identity)
        else:
            result = verify_quote(quote, self.policy, expected, self.platform_keys, kex_public, new_exchange_key())
            if result.trusted:
                if (time.monotonic() - issued) * 1000 > self.policy.max_quote_age_ms:
                    result = AttestationResult.rejected(RejectReason.EXPIRED, quote.identity)
                elif not self.replay.check_and_insert(quote.nonce):
                    result = AttestationResult.rejected(RejectReason.REPLAYED, quote.identity)
        session.result = result
        with self._lock:
            self.stats["trusted" if result.trusted else "rejected"] += 1
        return result

    def grant(self, result: AttestationResult, subscriber_id: int) -> GrantToken:
        return GrantToken(
            subscriber_id, result.identity.role, result.granted_levels, result.identity.code, int(time.time() * 1000)
        ).sign(self.grant_key)

    def deposit(self, session: _Session, publisher_id: int, bundle: KeyBundle) -> DataKey:
        result = self._require(session)
        role = result.identity.role
        if role not in (Role.PRODUCER, Role.AGGREGATOR, Role.BROKER):
            raise PermissionError(f"role {role.name} may not deposit keys")
        if publisher_id == DISSEMINATION_ID and role is not Role.BROKER:
            raise PermissionError("only the broker deposits the dissemination key")
        dk = unwrap_key(result.session, bundle)
        with self._lock:
            kept = [k for k in self._keys.get(publisher_id, []) if k.key_id != dk.key_id] + [dk]
            kept.sort(key=lambda k: k.key_id)
            self._keys[publisher_id] = kept[-KEEP_EPOCHS:]
        return dk

    def bundles_for(self, session: _Session, publisher_ids: list[int]) -> list[tuple[int, KeyBundle]]:
        result = self._require(session)
        if not (result.granted_levels & {PrivacyLevel.HIGH, PrivacyLevel.MODERATE}):
            return []
        role = result.identity.role
        out = []
        with self._lock:
            for pid in publisher_ids:
                if self.key_mode == KEY_MODE_BROKER and role is not Role.BROKER:
                    kept = self._keys.get(DISSEMINATION_ID, [])
                else:
                    kept = self._keys.get(pid, [])
                out.extend((pid, issue_data_key(result, dk)) for dk in kept)
        return out

    @staticmethod
    def _require(session: _Session) -> AttestationResult:
        if session.result is None or not session.result.trusted:
            raise PermissionError("session is not attested")
        return session.result

    def handle(self, session: _Session, body: dict) -> dict:
        op = body.get("op")
        if op == "challenge":
            return json_reply(nonce=self.challenge(session).hex())
        if op == "attest":
            try:
                quote = Quote.from_bytes(bytes.fromhex(body["quote"]))
                kex_public = bytes.fromhex(body["kex_public"])
            except (KeyError, ValueError):
                session.nonce = None
                return json_reply(False, error=RejectReason.MALFORMED.value, verdict="rejected")
            result = self.attest(session, quote, kex_public)
            if not result.trusted:
                log.info("attestation rejected: %s", result.reason.value)
                return json_reply(
                    verdict="rejected", reason=result.reason.value, levels=levels_mask(result.granted_levels)
                )
            token = self.grant(result, int(body.get("subscriber_id", 0)))
            bundles = self.bundles_for(session, [int(x) for x in body.get("want", [])])
            return json_reply(
                verdict="trusted",
                responder_public=result.responder_public.hex(),
                levels=levels_mask(result.granted_levels),
                token=token.to_dict(),
                bundles=[{"publisher_id": pid, "bundle": b.to_bytes().hex()} for pid, b in bundles],
            )
        if op == "deposit":
            try:
                dk = self.deposit(session, int(body["publisher_id"]), KeyBundle.from_bytes(bytes.fromhex(body["bundle"])))
            except (PermissionError, ValueError, KeyError) as exc:
                return json_reply(False, error=str(exc) or type(exc).__name__)
            except Exception as exc:  # unwrap failures
                return json_reply(False, error=type(exc).__name__)
            return json_reply(key_id=dk.key_id)
        if op == "fetch":
            try:
                bundles = self.bundles_for(session, [int(x) for x in body.get("want", [])])
            except PermissionError as exc:
                return json_reply(False, error=str(exc))
            return json_reply(bundles=[{"publisher_id": pid, "bundle": b.to_bytes().hex()} for pid, b in bundles])
        if op == "info":
            return json_reply(grant_public=self.grant_public.hex(), key_mode=self.key_mode)
        return json_reply(False, error=f"unknown op {op!r}")


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        attestor: Attestor = self.server.attestor
        conn = FrameSocket(self.request)
        session = _Session()
        while True:
            try:
                header, _, payload = conn.recv_frame()
            except (ConnectionError, OSError):
                return
            except ValueError:
                log.warning("malformed frame from %s", self.client_address)
                return
            if header.topic != ATTEST_TOPIC:
                conn.reply(ATTEST_TOPIC, json_reply(False, error="expected attest topic"))
                continue
            try:
                body = json.loads(payload)
            except ValueError:
                conn.reply(ATTEST_TOPIC, json_reply(False, error="bad json"))
                continue
            try:
                conn.reply(ATTEST_TOPIC, attestor.handle(session, body))
            except OSError:
                return


class AttestorServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, attestor: Attestor, addr=("127.0.0.1", 0)):
        self.attestor = attestor
        super().__init__(addr, _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> AttestorServer:
        threading.Thread(target=self.serve_forever, name="attestor", daemon=True).start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class AttestationFailed(PermissionError):
    def __init__(self, reason: str):
        super().__init__(f"attestation rejected: {reason}")
        self.reason = reason


@dataclass
class AttestedSession:
    """Client view of a completed attestation."""

    conn: FrameSocket
    session: SessionKey
    levels: frozenset[PrivacyLevel]
    token: GrantToken
    keys: dict[int, DataKey] = field(default_factory=dict)
    # every epoch seen so far, keyed by (publisher_id, key_id)
    epochs: dict[tuple[int, int], DataKey] = field(default_factory=dict)

    def _absorb(self, entries) -> dict[int, DataKey]:
        """Unwrap served bundles; returns the newest key per publisher."""
        got: dict[int, DataKey] = {}
        for e in entries:
            pid = int(e["publisher_id"])
            dk = unwrap_key(self.session, KeyBundle.from_bytes(bytes.fromhex(e["bundle"])))
            self.epochs[(pid, dk.key_id)] = dk
            if pid not in got or dk.key_id > got[pid].key_id:
                got[pid] = dk
        self.keys.update(got)
        return got

    def deposit(self, publisher_id: int, dk: DataKey) -> None:
        self.conn.request(
            ATTEST_TOPIC,
            {"op": "deposit", "publisher_id": publisher_id, "bundle": wrap_key(self.session, dk).to_bytes().hex()},
        )

    def fetch(self, publisher_ids) -> dict[int, DataKey]:
        reply = self.conn.request(ATTEST_TOPIC, {"op": "fetch", "want": list(publisher_ids)})
        return self._absorb(reply["bundles"])

    def close(self) -> None:
        self.conn.close()


def attest(
    addr,
    platform: Platform,
    code: CodeIdentity,
    role: Role,
    subscriber_id: int = 0,
    want: list[int] = (),
    retries: int = 20,
) -> AttestedSession:
    """Run the challenge/quote handshake against an Attestor daemon."""
    conn = FrameSocket.open(addr, retries=retries)
    try:
        nonce = bytes.fromhex(conn.request(ATTEST_TOPIC, {"op": "challenge"})["nonce"])
        kex = new_exchange_key()
        quote = platform.generate_quote(platform.identity(code, role), nonce, exchange_public(kex))
        try:
            reply = conn.request(
                ATTEST_TOPIC,
                {
                    "op": "attest",
                    "quote": quote.to_bytes().hex(),
                    "kex_public": exchange_public(kex).hex(),
                    "subscriber_id": subscriber_id,
                    "want": list(want),
                },
            )
        except RemoteError as exc:
            raise AttestationFailed(exc.error) from None
        if reply.get("verdict") != "trusted":
            raise AttestationFailed(reply.get("reason", "unknown"))
        session = establish_session(kex, bytes.fromhex(reply["responder_public"]), nonce, initiator=True)
        out = AttestedSession(conn, session, levels_from_mask(reply["levels"]), GrantToken.from_dict(reply["token"]))
        out._absorb(reply["bundles"])
        return out
    except BaseException:
        conn.close()
        raise


def attestor_info(addr, retries: int = 20) -> dict:
    with FrameSocket.open(addr, retries=retries) as conn:
        return conn.request(ATTEST_TOPIC, {"op": "info"})
