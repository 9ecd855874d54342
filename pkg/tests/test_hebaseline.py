from __future__ import annotations

import csv
import random

import pytest
from gmpy2 import powmod

from privbus.hebaseline import (
    DlogNotFound,
    Encryptor,
    GroupParams,
    HECiphertext,
    KeyShare,
    bsgs,
    decrypt_cooperatively,
    default_bound,
    he_aggregate,
    he_benchmark,
    he_combine,
    he_encrypt,
    partial_decrypt,
    setup,
    summarize,
    write_csv,
)

SMALL = GroupParams.small()


def test_group_params_valid():
    for P in (SMALL, GroupParams.rfc3526_2048()):
        assert P.q == (P.p - 1) // 2
        assert pow(P.g, P.q, P.p) == 1 and P.g != 1
    assert GroupParams.rfc3526_2048().bits == 2048
    with pytest.raises(ValueError):
        GroupParams(23, 11, 1)


def test_setup_consistency():
    shares, y = setup(1, SMALL)
    assert y.y == pow(SMALL.g, shares[0].x, SMALL.p)
    shares, y = setup(25, SMALL)
    prod = 1
    for s in shares:
        prod = prod * pow(SMALL.g, s.x, SMALL.p) % SMALL.p
    assert prod == y.y
    assert [s.meter_index for s in shares] == list(range(1, 26))


def test_zero_plaintext():
    shares, y = setup(3, SMALL)
    ct = he_encrypt(y, 0, r=5)
    assert ct.c2 == pow(y.y, 5, SMALL.p)
    assert decrypt_cooperatively(ct, shares, 10) == 0


def test_round_trip_random():
    shares, y = setup(4, SMALL)
    rng = random.Random(1)
    for _ in range(100):
        v = rng.randrange(0, 1 << 24)
        assert decrypt_cooperatively(he_encrypt(y, v), shares, 1 << 24) == v


def test_encryption_randomized_and_range_checked():
    _, y = setup(2, SMALL)
    assert he_encrypt(y, 9) != he_encrypt(y, 9)
    with pytest.raises(ValueError):
        he_encrypt(y, -1)
    with pytest.raises(ValueError):
        he_encrypt(y, (1 << 24) + 1)


def test_fixed_base_encryptor_matches_reference():
    _, y = setup(3, SMALL)
    enc = Encryptor(y)
    rng = random.Random(2)
    for _ in range(50):
        v, r = rng.randrange(0, 1 << 24), rng.randrange(1, SMALL.q)
        assert enc.encrypt(v, r) == he_encrypt(y, v, r)


def test_aggregate_examples():
    shares, y = setup(3, SMALL)
    zero = he_aggregate([he_encrypt(y, 0) for _ in range(5)], SMALL)
    assert decrypt_cooperatively(zero, shares, 100) == 0
    six = he_aggregate([he_encrypt(y, v) for v in (1, 2, 3)], SMALL)
    assert decrypt_cooperatively(six, shares, 100) == 6
    ct = he_encrypt(y, 1234)
    assert decrypt_cooperatively(he_aggregate([ct] * 7, SMALL), shares, 10_000) == 7 * 1234
    with pytest.raises(ValueError):
        he_aggregate([], SMALL)


def test_partials():
    ct = HECiphertext(pow(SMALL.g, 77, SMALL.p), 1)
    assert partial_decrypt(KeyShare(1, 0, SMALL), ct) == 1
    shares, _ = setup(5, SMALL)
    prod = 1
    for s in shares:
        prod = prod * partial_decrypt(s, ct) % SMALL.p
    assert prod == pow(ct.c1, sum(s.x for s in shares), SMALL.p)


def test_missing_partial_fails():
    shares, y = setup(6, SMALL)
    ct = he_aggregate([he_encrypt(y, v) for v in (10, 20, 30)], SMALL)
    partials = [partial_decrypt(s, ct) for s in shares]
    for drop in range(6):
        with pytest.raises(DlogNotFound):
            he_combine(ct, partials[:drop] + partials[drop + 1 :], 1 << 20, SMALL)


def test_combine_bounds_and_tamper():
    shares, y = setup(3, SMALL)
    rng = random.Random(3)
    for _ in range(20):
        v = rng.randrange(0, 10**6 + 1)
        assert decrypt_cooperatively(he_encrypt(y, v), shares, 10**6) == v
    ct = he_encrypt(y, 5000)
    with pytest.raises(DlogNotFound):
        decrypt_cooperatively(ct, shares, 4999)
    for _ in range(20):
        bad = HECiphertext(ct.c1, ct.c2 * pow(SMALL.g, rng.randrange(10**7, SMALL.q), SMALL.p) % SMALL.p)
        with pytest.raises(DlogNotFound):
            decrypt_cooperatively(bad, shares, 10**6)


def test_bsgs_against_brute_force():
    for x in [0, 1, 2, 999, 4095, 4096, 123_456]:
        assert bsgs(int(powmod(SMALL.g, x, SMALL.p)), 200_000, SMALL) == x


def test_bsgs_full_group_small_powers_of_two():
    # with g = 2, g^j for j < 2048 never wraps p; these once shared a table key
    full = GroupParams.rfc3526_2048()
    bound = 10 * (1 << 24)
    m = 1 << 18
    for x in [64, 65, 1000, 2047, 342 * m + 996, 600 * m + 100]:
        assert bsgs(int(powmod(full.g, x, full.p)), bound, full) == x


def test_default_bound():
    assert default_bound(10) == 10 * (1 << 24)


def test_two_hundred_meters_full_group():
    shares, y = setup(200)
    enc = Encryptor(y)
    readings = [random.Random(4).randrange(0, 1 << 24) for _ in range(200)]
    agg = he_aggregate([enc.encrypt(v) for v in readings])
    assert decrypt_cooperatively(agg, shares, default_bound(200)) == sum(readings)


def test_benchmark_rows_and_csv(tmp_path):
    rows = he_benchmark(sizes=(5, 10), runs=3, params=SMALL, seed=1)
    assert len(rows) == 2 * 2 * 3
    summary = {(s["scheme"], s["size"]): s for s in summarize(rows)}
    assert summary[("he", 10)]["runs"] == 3 and summary[("symmetric", 5)]["stdev_us"] >= 0
    out = tmp_path / "he.csv"
    write_csv(out, rows)
    got = list(csv.reader(out.open()))
    assert got[0] == ["scheme", "size", "run", "encrypt_us", "aggregate_us", "decrypt_us", "total_us"]
    assert len(got) == 13
