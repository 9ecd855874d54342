"""Simulated remote attestation.

A local "platform attestation key" (Ed25519) plays the quoting enclave:
it signs the code identity of the running component together with the
verifier's nonce and a digest of the component's ephemeral X25519 public
value. The Attestor checks the signature, the nonce and the policy
allowlist, then completes the key agreement to obtain a session key.
"""
from __future__ import annotations

import hashlib
import inspect
import json
import os
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey

from .crypto import CodeIdentity, DataKey, KeyBundle, SessionKey, code_hash, wrap_key
from .envelope import PrivacyLevel, levels_from_mask, levels_mask

NONCE_SIZE = 16
ALL_LEVELS = frozenset(PrivacyLevel)
PUBLIC_LEVELS = frozenset({PrivacyLevel.LOW})


class Role(IntEnum):
    PRODUCER = 0
    AGGREGATOR = 1
    CONSUMER = 2
    BROKER = 3

    @classmethod
    def parse(cls, name: str) -> Role:
        return cls[name.strip().upper()]


class MissingPlatformKey(RuntimeError):
    pass


class NotAttested(PermissionError):
    """Raised when a key is requested for a party that did not attest."""


class InvalidPublicValue(ValueError):
    pass


class Verdict(Enum):
    TRUSTED = "trusted"
    REJECTED = "rejected"


class RejectReason(str, Enum):
    BAD_SIGNATURE = "bad-signature"
    NONCE_MISMATCH = "nonce-mismatch"
    UNKNOWN_IDENTITY = "unknown-identity"
    WRONG_ROLE = "wrong-role"
    BAD_BINDING = "bad-key-binding"
    REPLAYED = "replayed-nonce"
    EXPIRED = "expired-nonce"
    MALFORMED = "malformed-quote"


@dataclass(frozen=True)
class EnclaveIdentity:
    code: CodeIdentity
    platform_id: int
    role: Role

    def to_bytes(self) -> bytes:
        return self.code.digest + struct.pack("<QB", self.platform_id, int(self.role))

    @classmethod
    def from_bytes(cls, data: bytes) -> EnclaveIdentity:
        if len(data) != 41:
            raise ValueError("identity must be 41 bytes")
        platform_id, role = struct.unpack_from("<QB", data, 32)
        return cls(CodeIdentity(bytes(data[:32])), platform_id, Role(role))


@dataclass(frozen=True)
class Quote:
    identity: EnclaveIdentity
    nonce: bytes
    report_data: bytes
    signature: bytes

    SIZE = 41 + NONCE_SIZE + 32 + 64

    def signed_bytes(self) -> bytes:
        return quote_body(self.identity, self.nonce, self.report_data)

    def to_bytes(self) -> bytes:
        return self.identity.to_bytes() + self.nonce + self.report_data + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> Quote:
        if len(data) != cls.SIZE:
            raise ValueError(f"quote must be {cls.SIZE} bytes")
        return cls(
            EnclaveIdentity.from_bytes(data[:41]),
            bytes(data[41:57]),
            bytes(data[57:89]),
            bytes(data[89:]),
        )


def quote_body(identity: EnclaveIdentity, nonce: bytes, report_data: bytes) -> bytes:
    return b"privbus-quote\x01" + identity.to_bytes() + nonce + report_data


@dataclass
class Policy:
    allowlist: dict[Role, frozenset[CodeIdentity]] = field(default_factory=dict)
    max_quote_age_ms: int = 30_000
    levels: dict[Role, frozenset[PrivacyLevel]] = field(default_factory=dict)

    def granted_levels(self, role: Role) -> frozenset[PrivacyLevel]:
        return self.levels.get(role, ALL_LEVELS)

    @classmethod
    def from_dict(cls, d: dict, max_quote_age_ms: int = 30_000) -> Policy:
        allow = {Role.parse(role): frozenset(CodeIdentity.fromhex(h) for h in digests) for role, digests in d.items()}
        return cls(allow, max_quote_age_ms)

    @classmethod
    def load(cls, path: str | Path, max_quote_age_ms: int = 30_000) -> Policy:
        return cls.from_dict(json.loads(Path(path).read_text()), max_quote_age_ms)

    def to_dict(self) -> dict:
        return {role.name.lower(): sorted(c.hex() for c in codes) for role, codes in self.allowlist.items()}


@dataclass(frozen=True)
class AttestationResult:
    verdict: Verdict
    reason: RejectReason | None = None
    session: SessionKey | None = None
    granted_levels: frozenset[PrivacyLevel] = PUBLIC_LEVELS
    responder_public: bytes | None = None
    identity: EnclaveIdentity | None = None

    @property
    def trusted(self) -> bool:
        return self.verdict is Verdict.TRUSTED

    @classmethod
    def rejected(cls, reason: RejectReason, identity: EnclaveIdentity | None = None) -> AttestationResult:
        return cls(Verdict.REJECTED, reason, None, PUBLIC_LEVELS, None, identity)


class Platform:
    """Quoting enclave stand-in holding the platform attestation key."""

    def __init__(self, signing_key: Ed25519PrivateKey | None, platform_id: int = 1):
        self.signing_key = signing_key
        self.platform_id = platform_id

    def identity(self, code: CodeIdentity, role: Role) -> EnclaveIdentity:
        return EnclaveIdentity(code, self.platform_id, role)

    def generate_quote(self, identity: EnclaveIdentity, nonce: bytes, key_agreement_public: bytes) -> Quote:
        return generate_quote(identity, nonce, key_agreement_public, self.signing_key)


def generate_quote(
    identity: EnclaveIdentity,
    challenge_nonce: bytes,
    key_agreement_public: bytes,
    platform_key: Ed25519PrivateKey | None,
) -> Quote:
    if platform_key is None:
        raise MissingPlatformKey("no platform attestation key provisioned")
    if len(challenge_nonce) != NONCE_SIZE:
        raise ValueError("nonce must be 16 bytes")
    report_data = hashlib.sha256(key_agreement_public).digest()
    sig = platform_key.sign(quote_body(identity, challenge_nonce, report_data))
    return Quote(identity, bytes(challenge_nonce), report_data, sig)


def new_exchange_key() -> X25519PrivateKey:
    return X25519PrivateKey.generate()


def exchange_public(key: X25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def establish_session(
    own: X25519PrivateKey, peer_public: bytes, nonce: bytes, *, initiator: bool
) -> SessionKey:
    """Ephemeral X25519 agreement, hashed with both public values and the nonce.

    The initiator is the attesting component, the responder the Attestor;
    both sides order the public values the same way.
    """
    try:
        peer = X25519PublicKey.from_public_bytes(peer_public)
        shared = own.exchange(peer)
    except ValueError as exc:
        raise InvalidPublicValue(str(exc)) from None
    if shared == bytes(32):
        raise InvalidPublicValue("degenerate shared secret")
    mine = exchange_public(own)
    first, second = (mine, peer_public) if initiator else (peer_public, mine)
    return SessionKey(hashlib.sha256(b"privbus-session\x01" + shared + first + second + nonce).digest())


def _classify_identity(identity: EnclaveIdentity, policy: Policy) -> RejectReason | None:
    if identity.code in policy.allowlist.get(identity.role, frozenset()):
        return None
    if any(identity.code in codes for codes in policy.allowlist.values()):
        return RejectReason.WRONG_ROLE
    return RejectReason.UNKNOWN_IDENTITY


def verify_quote(
    q: Quote,
    p: Policy,
    expected_nonce: bytes,
    platform_keys: list[Ed25519PublicKey] | Ed25519PublicKey,
    key_agreement_public: bytes | None = None,
    responder: X25519PrivateKey | None = None,
) -> AttestationResult:
    """Check a quote against the policy; never raises for bad evidence.

    With ``key_agreement_public`` supplied, a trusted verdict also carries
    the responder half of the key agreement and the derived session key.
    """
    if isinstance(platform_keys, Ed25519PublicKey):
        platform_keys = [platform_keys]
    body = q.signed_bytes()
    for key in platform_keys:
        try:
            key.verify(q.signature, body)
            break
        except (InvalidSignature, ValueError):
            continue
    else:
        return AttestationResult.rejected(RejectReason.BAD_SIGNATURE, q.identity)
    if q.nonce != expected_nonce:
        return AttestationResult.rejected(RejectReason.NONCE_MISMATCH, q.identity)
    reason = _classify_identity(q.identity, p)
    if reason is not None:
        return AttestationResult.rejected(reason, q.identity)
    if key_agreement_public is None:
        return AttestationResult(Verdict.TRUSTED, None, None, p.granted_levels(q.identity.role), None, q.identity)
    if hashlib.sha256(key_agreement_public).digest() != q.report_data:
        return AttestationResult.rejected(RejectReason.BAD_BINDING, q.identity)
    responder = responder or new_exchange_key()
    try:
        session = establish_session(responder, key_agreement_public, q.nonce, initiator=False)
    except InvalidPublicValue:
        return AttestationResult.rejected(RejectReason.BAD_BINDING, q.identity)
    return AttestationResult(
        Verdict.TRUSTED, None, session, p.granted_levels(q.identity.role), exchange_public(responder), q.identity
    )


def issue_data_key(result: AttestationResult, dk: DataKey) -> KeyBundle:
    if not result.trusted or result.session is None:
        raise NotAttested(f"refusing to issue a data key: {result.reason.value if result.reason else 'no session'}")
    return wrap_key(result.session, dk)


class ReplayCache:
    """Bounded LRU of consumed nonces; check-and-insert is atomic."""

    def __init__(self, capacity: int = 1 << 16):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._seen: OrderedDict[bytes, None] = OrderedDict()
        self._lock = threading.Lock()

    def check_and_insert(self, nonce: bytes) -> bool:
        """True if the nonce is fresh (and is now recorded)."""
        with self._lock:
            if nonce in self._seen:
                self._seen.move_to_end(nonce)
                return False
            self._seen[nonce] = None
            if len(self._seen) > self.capacity:
                self._seen.popitem(last=False)
            return True

    def __len__(self) -> int:
        return len(self._seen)


@dataclass(frozen=True)
class GrantToken:
    """Attestor-signed statement that a subscriber passed attestation.

    Publishers check it before authorizing subscriptions above Low.
    """

    subscriber_id: int
    role: Role
    levels: frozenset[PrivacyLevel]
    code: CodeIdentity
    issued_ms: int
    signature: bytes = b""

    def body(self) -> bytes:
        return (
            b"privbus-grant\x01"
            + struct.pack("<QBBQ", self.subscriber_id, int(self.role), levels_mask(self.levels), self.issued_ms)
            + self.code.digest
        )

    def sign(self, key: Ed25519PrivateKey) -> GrantToken:
        return GrantToken(self.subscriber_id, self.role, self.levels, self.code, self.issued_ms, key.sign(self.body()))

    def verify(self, key: Ed25519PublicKey, max_age_ms: int | None = None) -> bool:
        try:
            key.verify(self.signature, self.body())
        except (InvalidSignature, ValueError):
            return False
        if max_age_ms is not None and abs(int(time.time() * 1000) - self.issued_ms) > max_age_ms:
            return False
        return True

    def to_dict(self) -> dict:
        return {
            "subscriber_id": self.subscriber_id,
            "role": self.role.name.lower(),
            "levels": levels_mask(self.levels),
            "code": self.code.hex(),
            "issued_ms": self.issued_ms,
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> GrantToken:
        return cls(
            int(d["subscriber_id"]),
            Role.parse(d["role"]),
            levels_from_mask(int(d["levels"])),
            CodeIdentity.fromhex(d["code"]),
            int(d["issued_ms"]),
            bytes.fromhex(d["signature"]),
        )


def module_identity(obj) -> CodeIdentity:
    """Code identity of the source file defining ``obj`` (a module or class)."""
    return code_hash(Path(inspect.getsourcefile(obj)).read_bytes())


def new_nonce() -> bytes:
    return os.urandom(NONCE_SIZE)
