"""Payload protection, key wrapping and code identity.

Payloads use AES-256 in counter mode (no integrity; the record decoder
catches tampering). Data keys travel wrapped under AES-GCM with the
session key negotiated during attestation.
"""
from __future__ import annotations

import hashlib
import os
import struct
import threading
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

IV_SIZE = 16
KEY_SIZE = 32
_GCM_NONCE = 12
_MASK128 = (1 << 128) - 1


class KeyUnwrapError(Exception):
    """Wrapped key failed authentication (wrong session key or tampered bundle)."""


@dataclass(frozen=True)
class DataKey:
    key_id: int
    secret: bytes

    def __post_init__(self) -> None:
        if len(self.secret) != KEY_SIZE:
            raise ValueError("data key secret must be 32 bytes")
        if not 0 <= self.key_id <= 0xFFFFFFFF:
            raise ValueError("key_id must fit in 32 bits")

    @classmethod
    def generate(cls, key_id: int = 0) -> DataKey:
        return cls(key_id, os.urandom(KEY_SIZE))

    def rotate(self) -> DataKey:
        return DataKey.generate((self.key_id + 1) & 0xFFFFFFFF)

    def __repr__(self) -> str:
        return f"DataKey(key_id={self.key_id}, secret=<redacted>)"


@dataclass(frozen=True)
class SessionKey:
    secret: bytes

    def __post_init__(self) -> None:
        if len(self.secret) != KEY_SIZE:
            raise ValueError("session key must be 32 bytes")

    def __repr__(self) -> str:
        return "SessionKey(<redacted>)"


@dataclass(frozen=True)
class CodeIdentity:
    digest: bytes

    def __post_init__(self) -> None:
        if len(self.digest) != 32:
            raise ValueError("code identity is a 32-byte SHA-256 digest")

    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def fromhex(cls, s: str) -> CodeIdentity:
        return cls(bytes.fromhex(s))

    def __str__(self) -> str:
        return self.hex()


@dataclass(frozen=True)
class KeyBundle:
    key_id: int
    wrapped: bytes

    def to_bytes(self) -> bytes:
        return struct.pack("<I", self.key_id) + self.wrapped

    @classmethod
    def from_bytes(cls, data: bytes) -> KeyBundle:
        if len(data) < 4:
            raise KeyUnwrapError("bundle too short")
        return cls(struct.unpack_from("<I", data)[0], bytes(data[4:]))


_local = threading.local()


def _keystream_encryptor(secret: bytes):
    # ECB encryptor objects are stateless across update() calls but not
    # thread-safe, hence one cache per thread.
    cache = getattr(_local, "ecb", None)
    if cache is None:
        cache = _local.ecb = {}
    enc = cache.get(secret)
    if enc is None:
        if len(cache) > 256:
            cache.clear()
        enc = cache[secret] = Cipher(algorithms.AES(secret), modes.ECB()).encryptor()
    return enc


def _ctr_xor(secret: bytes, iv: bytes, data: bytes) -> bytes:
    n = len(data)
    if n == 0:
        return b""
    if len(iv) != IV_SIZE:
        raise ValueError("IV must be 16 bytes")
    counter = int.from_bytes(iv, "big")
    blocks = b"".join(((counter + i) & _MASK128).to_bytes(16, "big") for i in range((n + 15) // 16))
    stream = _keystream_encryptor(secret).update(blocks)
    return (int.from_bytes(data, "little") ^ int.from_bytes(stream[:n], "little")).to_bytes(n, "little")


def seal_payload(k: DataKey, iv: bytes, plaintext: bytes) -> bytes:
    """Counter-mode encryption; output has the plaintext's length."""
    return _ctr_xor(k.secret, iv, plaintext)


def open_payload(k: DataKey, iv: bytes, ciphertext: bytes) -> bytes:
    return _ctr_xor(k.secret, iv, ciphertext)


def derive_iv(publisher_id: int, key_epoch: int, seq: int) -> bytes:
    """publisher_id (8B) | key_epoch (4B) | low 32 bits of seq (4B), little-endian.

    The initial counter block of a message is unique per (key, publisher)
    while seq < 2**32. Later blocks of a multi-block payload increment the
    last byte, i.e. the top byte of seq, so two messages of one epoch never
    share keystream as long as an epoch spans fewer than 2**24 sequence
    numbers (rotation default is 2**20).
    """
    return struct.pack("<QII", publisher_id, key_epoch, seq & 0xFFFFFFFF)


_SEQ_PREFIX = struct.Struct("<I")


def seal_counter_payload(k: DataKey, publisher_id: int, seq: int, plaintext: bytes) -> bytes:
    """Publication payload: low 32 bits of seq in clear, then the ciphertext.

    The clear prefix lets a key holder rebuild the IV from the header
    (publisher_id, key_epoch) without any per-stream state.
    """
    seq32 = seq & 0xFFFFFFFF
    return _SEQ_PREFIX.pack(seq32) + seal_payload(k, derive_iv(publisher_id, k.key_id, seq32), plaintext)


def open_counter_payload(k: DataKey, publisher_id: int, payload: bytes) -> bytes:
    if len(payload) < _SEQ_PREFIX.size:
        raise ValueError("counter-mode payload shorter than its IV prefix")
    (seq32,) = _SEQ_PREFIX.unpack_from(payload)
    return open_payload(k, derive_iv(publisher_id, k.key_id, seq32), payload[_SEQ_PREFIX.size :])


def wrap_key(sk: SessionKey, dk: DataKey) -> KeyBundle:
    nonce = os.urandom(_GCM_NONCE)
    aad = b"privbus-wrap" + struct.pack("<I", dk.key_id)
    return KeyBundle(dk.key_id, nonce + AESGCM(sk.secret).encrypt(nonce, dk.secret, aad))


def unwrap_key(sk: SessionKey, b: KeyBundle) -> DataKey:
    if len(b.wrapped) != _GCM_NONCE + KEY_SIZE + 16:
        raise KeyUnwrapError("wrapped key has wrong length")
    nonce, body = b.wrapped[:_GCM_NONCE], b.wrapped[_GCM_NONCE:]
    aad = b"privbus-wrap" + struct.pack("<I", b.key_id)
    try:
        secret = AESGCM(sk.secret).decrypt(nonce, body, aad)
    except InvalidTag:
        raise KeyUnwrapError("key bundle failed authentication") from None
    return DataKey(b.key_id, secret)


def code_hash(artifact: bytes) -> CodeIdentity:
    return CodeIdentity(hashlib.sha256(artifact).digest())


# Signing keys (platform attestation key, publisher keys, attestor grant key)
# are Ed25519 and travel as raw 32-byte hex in configuration.


def new_signing_key() -> Ed25519PrivateKey:
    return Ed25519PrivateKey.generate()


def signing_key_hex(key: Ed25519PrivateKey) -> str:
    return key.private_bytes(
        serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()
    ).hex()


def signing_key_from_hex(s: str) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(bytes.fromhex(s))


def public_bytes(key: Ed25519PrivateKey | Ed25519PublicKey) -> bytes:
    if isinstance(key, Ed25519PrivateKey):
        key = key.public_key()
    return key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def verify_key_from_bytes(raw: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(raw)
