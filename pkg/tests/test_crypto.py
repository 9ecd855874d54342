from __future__ import annotations

import hashlib
import os
import random

import pytest
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from privbus.crypto import (
    DataKey,
    KeyBundle,
    KeyUnwrapError,
    SessionKey,
    code_hash,
    derive_iv,
    open_counter_payload,
    open_payload,
    seal_counter_payload,
    seal_payload,
    unwrap_key,
    wrap_key,
)

# NIST SP 800-38A, F.5.5 CTR-AES256.Encrypt
KAT_KEY = bytes.fromhex("603deb1015ca71be2b73aef0857d77811f352c073b6108d72d9810a30914dff4")
KAT_IV = bytes.fromhex("f0f1f2f3f4f5f6f7f8f9fafbfcfdfeff")
KAT_PT = bytes.fromhex(
    "6bc1bee22e409f96e93d7e117393172a"
    "ae2d8a571e03ac9c9eb76fac45af8e51"
    "30c81c46a35ce411e5fbc1191a0a52ef"
    "f69f2445df4f9b17ad2b417be66c3710"
)
KAT_CT = bytes.fromhex(
    "601ec313775789a5b7a7f504bbf3d228"
    "f443e3ca4d62b59aca84e990cacaf5c5"
    "2b0930daa23de94ce87017ba2d84988d"
    "dfc9c58db67aada613c2dd08457941a6"
)


def library_ctr(key: bytes, iv: bytes, data: bytes) -> bytes:
    e = Cipher(algorithms.AES(key), modes.CTR(iv)).encryptor()
    return e.update(data) + e.finalize()


def test_known_answer_vector():
    k = DataKey(0, KAT_KEY)
    assert seal_payload(k, KAT_IV, KAT_PT) == KAT_CT
    assert open_payload(k, KAT_IV, KAT_CT) == KAT_PT


def test_counter_wraps_like_reference():
    k = DataKey(0, os.urandom(32))
    iv = b"\xff" * 16
    data = os.urandom(50)
    assert seal_payload(k, iv, data) == library_ctr(k.secret, iv, data)


def test_seal_open_inverse_random():
    rng = random.Random(1)
    for _ in range(1000):
        k = DataKey(rng.getrandbits(32), rng.randbytes(32))
        iv = rng.randbytes(16)
        pt = rng.randbytes(rng.randrange(0, 100))
        ct = seal_payload(k, iv, pt)
        assert len(ct) == len(pt)
        assert ct == library_ctr(k.secret, iv, pt)
        assert open_payload(k, iv, ct) == pt


def test_one_bit_iv_change_garbles():
    k = DataKey(0, os.urandom(32))
    iv = os.urandom(16)
    pt = os.urandom(37)
    ct = seal_payload(k, iv, pt)
    for bit in range(128):
        flipped = (int.from_bytes(iv, "big") ^ (1 << bit)).to_bytes(16, "big")
        assert open_payload(k, flipped, ct) != pt


def test_derive_iv_layout():
    assert derive_iv(0, 0, 0) == bytes(16)
    assert derive_iv(1, 1, 1) == bytes([1] + [0] * 7 + [1, 0, 0, 0] + [1, 0, 0, 0])
    assert derive_iv(1, 0, 2**32 + 5) == derive_iv(1, 0, 5)


def test_derive_iv_collision_scan():
    rng = random.Random(2)
    triples = {(rng.getrandbits(64), rng.getrandbits(32), rng.getrandbits(32)) for _ in range(100_000)}
    ivs = {derive_iv(*t) for t in triples}
    assert len(ivs) == len(triples)


def test_counter_payload_round_trip():
    k = DataKey(4, os.urandom(32))
    pt = os.urandom(37)
    payload = seal_counter_payload(k, 9, 123, pt)
    assert payload[:4] == (123).to_bytes(4, "little")
    assert payload[4:] == library_ctr(k.secret, derive_iv(9, 4, 123), pt)
    assert open_counter_payload(k, 9, payload) == pt


def test_wrap_unwrap():
    sk = SessionKey(os.urandom(32))
    dk = DataKey.generate(7)
    assert unwrap_key(sk, wrap_key(sk, dk)) == dk


def test_unwrap_wrong_session_fails():
    dk = DataKey.generate(7)
    for _ in range(100):
        b = wrap_key(SessionKey(os.urandom(32)), dk)
        with pytest.raises(KeyUnwrapError):
            unwrap_key(SessionKey(os.urandom(32)), b)


def test_unwrap_bit_flip_fails():
    sk = SessionKey(os.urandom(32))
    b = wrap_key(sk, DataKey.generate(7))
    for i in range(len(b.wrapped)):
        for bit in (0, 7):
            w = bytearray(b.wrapped)
            w[i] ^= 1 << bit
            with pytest.raises(KeyUnwrapError):
                unwrap_key(sk, KeyBundle(b.key_id, bytes(w)))
    with pytest.raises(KeyUnwrapError):
        unwrap_key(sk, KeyBundle(b.key_id + 1, b.wrapped))


def test_bundle_serialization():
    b = wrap_key(SessionKey(os.urandom(32)), DataKey.generate(3))
    assert KeyBundle.from_bytes(b.to_bytes()) == b


def test_code_hash():
    assert code_hash(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert code_hash(b"abc") == code_hash(b"abc")
    rng = random.Random(3)
    for _ in range(1000):
        data = bytearray(rng.randbytes(64))
        before = code_hash(bytes(data))
        data[rng.randrange(64)] ^= rng.randrange(1, 256)
        assert code_hash(bytes(data)) != before
        assert code_hash(bytes(data)).digest == hashlib.sha256(data).digest()


def test_data_key_rotation_and_repr():
    k = DataKey.generate(0)
    assert k.rotate().key_id == 1
    assert k.secret.hex() not in repr(k)
