"""Additive homomorphic aggregation baseline (distributed-key exponential ElGamal).

Each meter holds a share x_i of the joint secret; the joint public key is
y = g^(sum x_i). Readings are encrypted as (g^r, g^m y^r), multiplied
together, and decrypted cooperatively: every share holder contributes
c1^x_i and the sum is recovered from g^sum by baby-step giant-step.

Only used to compare against the symmetric path, so the group is fixed to
a standard 2048-bit safe prime and the code favours honest timings over
generality.
"""
from __future__ import annotations

import csv
import math
import secrets
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import gmpy2
from gmpy2 import mpz, powmod

# RFC 3526 group 14. p = 2q + 1 with q prime and p = 7 (mod 8), so 2 is a
# quadratic residue and generates the order-q subgroup.
_RFC3526_2048 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)
# 129-bit safe prime for fast unit tests; 4 = 2^2 is a square, hence in the subgroup.
_TEST_129 = 0x1000000000000000000000000000030A3

M_MAX = 1 << 24
WINDOW_BITS = 8
BABY_MIN = 1 << 18
# Baby-step keys are residues mod this prime. Low bits alone fail for g = 2:
# g^j is a bare power of two until it wraps p, so those keys are all zero.
KEY_MOD = (1 << 64) - 59
CSV_COLUMNS = ("scheme", "size", "run", "encrypt_us", "aggregate_us", "decrypt_us", "total_us")


class DlogNotFound(ArithmeticError):
    """The plaintext sum is outside [0, bound] or the partials are wrong."""


@dataclass(frozen=True)
class GroupParams:
    p: int
    q: int
    g: int

    def __post_init__(self) -> None:
        if not gmpy2.is_prime(self.p, 32) or not gmpy2.is_prime(self.q, 32):
            raise ValueError("p and q must be prime")
        if self.p != 2 * self.q + 1:
            raise ValueError("p must equal 2q + 1")
        if self.g % self.p == 1 or powmod(self.g, self.q, self.p) != 1:
            raise ValueError("g does not generate the order-q subgroup")

    @classmethod
    def rfc3526_2048(cls) -> GroupParams:
        return cls(_RFC3526_2048, (_RFC3526_2048 - 1) // 2, 2)

    @classmethod
    def small(cls) -> GroupParams:
        return cls(_TEST_129, (_TEST_129 - 1) // 2, 4)

    @property
    def bits(self) -> int:
        return self.p.bit_length()

    def contains(self, element: int) -> bool:
        return 0 < element < self.p and powmod(element, self.q, self.p) == 1


DEFAULT_PARAMS: GroupParams | None = None


def default_params() -> GroupParams:
    global DEFAULT_PARAMS
    if DEFAULT_PARAMS is None:
        DEFAULT_PARAMS = GroupParams.rfc3526_2048()
    return DEFAULT_PARAMS


@dataclass(frozen=True)
class KeyShare:
    meter_index: int
    x: int
    params: GroupParams


@dataclass(frozen=True)
class JointPublicKey:
    y: int
    params: GroupParams


@dataclass(frozen=True)
class HECiphertext:
    c1: int
    c2: int


class FixedBase:
    """Windowed precomputation for repeated exponentiation of one base.

    Row k holds base^(d * 2^(w k)) for every digit d, so an exponent costs
    one multiplication per window instead of a square-and-multiply chain.
    """

    def __init__(self, base: int, modulus: int, exp_bits: int, window: int = WINDOW_BITS):
        self.modulus = mpz(modulus)
        self.window = window
        self.mask = (1 << window) - 1
        rows = []
        b = mpz(base) % self.modulus
        for _ in range(-(-exp_bits // window)):
            row = [mpz(1)]
            for _ in range(self.mask):
                row.append(row[-1] * b % self.modulus)
            rows.append(row)
            b = row[-1] * b % self.modulus
        self.rows = rows

    def pow(self, e: int) -> mpz:
        if e >> (self.window * len(self.rows)):
            raise ValueError("exponent wider than the precomputed table")
        acc = mpz(1)
        m, w, mask = self.modulus, self.window, self.mask
        for row in self.rows:
            if not e:
                break
            d = e & mask
            if d:
                acc = acc * row[d] % m
            e >>= w
        return acc


def _rand_exponent(q: int) -> int:
    return 1 + secrets.randbelow(q - 1)


def setup(n: int, params: GroupParams | None = None) -> tuple[list[KeyShare], JointPublicKey]:
    if n < 1:
        raise ValueError("need at least one share")
    params = params or default_params()
    shares = [KeyShare(i, _rand_exponent(params.q), params) for i in range(1, n + 1)]
    y = mpz(1)
    for s in shares:
        y = y * powmod(params.g, s.x, params.p) % params.p
    return shares, JointPublicKey(int(y), params)


def _check_m(m: int, m_max: int) -> None:
    if not 0 <= m <= m_max:
        raise ValueError(f"reading {m} outside [0, {m_max}]")


def he_encrypt(y: JointPublicKey, m: int, r: int | None = None, m_max: int = M_MAX) -> HECiphertext:
    _check_m(m, m_max)
    P = y.params
    if r is None:
        r = _rand_exponent(P.q)
    elif not 1 <= r < P.q:
        raise ValueError("r must be in [1, q-1]")
    c1 = powmod(P.g, r, P.p)
    c2 = powmod(P.g, m, P.p) * powmod(y.y, r, P.p) % P.p
    return HECiphertext(int(c1), int(c2))


class Encryptor:
    """Same result as :func:`he_encrypt`, with fixed-base tables for g and y."""

    def __init__(self, y: JointPublicKey, m_max: int = M_MAX):
        P = y.params
        self.key = y
        self.m_max = m_max
        self.p = mpz(P.p)
        self.q = P.q
        qbits = P.q.bit_length()
        self.g_table = FixedBase(P.g, P.p, qbits)
        self.y_table = FixedBase(y.y, P.p, qbits)

    def encrypt(self, m: int, r: int | None = None) -> HECiphertext:
        _check_m(m, self.m_max)
        if r is None:
            r = _rand_exponent(self.q)
        c1 = self.g_table.pow(r)
        c2 = self.g_table.pow(m) * self.y_table.pow(r) % self.p
        return HECiphertext(int(c1), int(c2))


def he_aggregate(cts: Sequence[HECiphertext], params: GroupParams | None = None) -> HECiphertext:
    if not cts:
        raise ValueError("cannot aggregate an empty list")
    p = mpz((params or default_params()).p)
    c1 = c2 = mpz(1)
    for ct in cts:
        c1 = c1 * ct.c1 % p
        c2 = c2 * ct.c2 % p
    return HECiphertext(int(c1), int(c2))


def partial_decrypt(share: KeyShare, ct: HECiphertext) -> int:
    return int(powmod(ct.c1, share.x, share.params.p))


class BabySteps:
    """Table of g^j for j < m, keyed by the element reduced mod KEY_MOD."""

    _cache: dict[tuple[int, int], BabySteps] = {}

    def __init__(self, params: GroupParams, m: int):
        self.params = params
        self.m = m
        p = mpz(params.p)
        table: dict[int, int] = {}
        e = mpz(1)
        g = mpz(params.g)
        for j in range(m):
            table.setdefault(int(e % KEY_MOD), j)
            e = e * g % p
        self.table = table
        # g^(-m) drives the giant steps.
        self.giant = int(powmod(e, -1, p))

    @classmethod
    def for_bound(cls, params: GroupParams, bound: int) -> BabySteps:
        need = min(bound + 1, max(math.isqrt(bound) + 1, BABY_MIN))
        key = (params.p, params.g)
        cached = cls._cache.get(key)
        if cached is None or cached.m < min(need, math.isqrt(bound) + 1):
            cached = cls._cache[key] = cls(params, need)
        return cached

    def solve(self, h: int, bound: int) -> int:
        P = self.params
        p = mpz(P.p)
        gamma = mpz(h) % p
        giant = mpz(self.giant)
        table = self.table
        m = self.m
        for i in range(bound // m + 1):
            j = table.get(int(gamma % KEY_MOD))
            if j is not None:
                x = i * m + j
                # Reduced keys can collide; confirm before answering.
                if x <= bound and powmod(P.g, x, p) == h % P.p:
                    return x
            gamma = gamma * giant % p
        raise DlogNotFound(f"no discrete log in [0, {bound}]")


def bsgs(h: int, bound: int, params: GroupParams | None = None) -> int:
    params = params or default_params()
    if bound < 0:
        raise ValueError("bound must be non-negative")
    return BabySteps.for_bound(params, bound).solve(h, bound)


def he_combine(ct: HECiphertext, partials: Sequence[int], bound: int, params: GroupParams | None = None) -> int:
    params = params or default_params()
    p = mpz(params.p)
    mask = mpz(1)
    for d in partials:
        mask = mask * d % p
    gm = mpz(ct.c2) * powmod(mask, -1, p) % p
    return bsgs(int(gm), bound, params)


def default_bound(size: int, m_max: int = M_MAX) -> int:
    return size * m_max


def decrypt_cooperatively(ct: HECiphertext, shares: Sequence[KeyShare], bound: int) -> int:
    return he_combine(ct, [partial_decrypt(s, ct) for s in shares], bound, shares[0].params)


# -- benchmark -------------------------------------------------------------


@dataclass(frozen=True)
class TimingRow:
    scheme: str
    size: int
    run: int
    encrypt_us: float
    aggregate_us: float
    decrypt_us: float

    @property
    def total_us(self) -> float:
        return self.encrypt_us + self.aggregate_us + self.decrypt_us

    def as_tuple(self) -> tuple:
        return (
            self.scheme,
            self.size,
            self.run,
            round(self.encrypt_us, 1),
            round(self.aggregate_us, 1),
            round(self.decrypt_us, 1),
            round(self.total_us, 1),
        )


def _timed(fn: Callable, *args):
    t0 = time.perf_counter_ns()
    out = fn(*args)
    return out, (time.perf_counter_ns() - t0) / 1000


def he_run(readings: Sequence[int], shares, enc: Encryptor, run: int = 0) -> tuple[TimingRow, int]:
    n = len(readings)
    params = shares[0].params
    bound = default_bound(n, enc.m_max)
    BabySteps.for_bound(params, bound)  # table build is setup, not per-sum cost
    cts, t_enc = _timed(lambda: [enc.encrypt(m) for m in readings])
    agg, t_agg = _timed(he_aggregate, cts, params)
    total, t_dec = _timed(decrypt_cooperatively, agg, shares, bound)
    return TimingRow("he", n, run, t_enc, t_agg, t_dec), total


def symmetric_run(readings: Sequence[int], run: int = 0) -> tuple[TimingRow, int]:
    """Seal, open and sum the same batch on the symmetric path."""
    from .crypto import DataKey, open_counter_payload, seal_counter_payload
    from .envelope import Measurement

    dk = DataKey.generate(0)
    records = [Measurement(i, 0, m, i).to_bytes() for i, m in enumerate(readings)]

    def seal():
        return [seal_counter_payload(dk, i, i, rec) for i, rec in enumerate(records)]

    def open_all(sealed):
        return [Measurement.from_bytes(open_counter_payload(dk, i, s)).value_mw for i, s in enumerate(sealed)]

    sealed, t_enc = _timed(seal)
    values, t_dec = _timed(open_all, sealed)
    total, t_agg = _timed(sum, values)
    return TimingRow("symmetric", len(readings), run, t_enc, t_agg, t_dec), total


def he_benchmark(
    sizes: Sequence[int] = (10, 50, 100, 200, 400, 800, 1000),
    runs: int = 10,
    params: GroupParams | None = None,
    m_max: int = M_MAX,
    seed: int | None = None,
    progress: Callable[[TimingRow], None] | None = None,
) -> list[TimingRow]:
    """Time both paths on identical random batches; one row per (scheme, size, run)."""
    import random

    params = params or default_params()
    rng = random.Random(seed)
    rows = []
    for size in sizes:
        shares, y = setup(size, params)
        enc = Encryptor(y, m_max)
        for run in range(runs):
            readings = [rng.randint(0, m_max) for _ in range(size)]
            expected = sum(readings)
            for fn in (lambda: he_run(readings, shares, enc, run), lambda: symmetric_run(readings, run)):
                row, total = fn()
                if total != expected:
                    raise AssertionError(f"{row.scheme} path summed {total}, expected {expected}")
                rows.append(row)
                if progress:
                    progress(row)
    return rows


def summarize(rows: Sequence[TimingRow]) -> list[dict]:
    groups: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        groups.setdefault((r.scheme, r.size), []).append(r.total_us)
    out = []
    for (scheme, size), xs in sorted(groups.items()):
        out.append(
            {
                "scheme": scheme,
                "size": size,
                "runs": len(xs),
                "mean_us": statistics.fmean(xs),
                "stdev_us": statistics.stdev(xs) if len(xs) > 1 else 0.0,
            }
        )
    return out


def write_csv(path: str | Path, rows: Sequence[TimingRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.as_tuple())
