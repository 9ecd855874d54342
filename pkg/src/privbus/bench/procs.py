"""Entry points for the benchmark's child processes.

Each child reports ``("ready", ...)`` on its pipe, then serves commands
until told to stop. Configuration travels as plain dicts so the children
can be started with the ``spawn`` method.
"""
from __future__ import annotations

import asyncio
import logging
import time

import numpy as np

from ..attestation import PUBLIC_LEVELS, Platform, Role
from ..crypto import DataKey, signing_key_from_hex, verify_key_from_bytes
from ..envelope import PrivacyLevel, encode_publication
from ..wire import connect

SECURE = "secure"
REGULAR = "regular"
LEAD_NS = 20_000_000
MAX_BATCH = 64
TICK_NS = 1_000_000


def _logging(cfg: dict) -> None:
    logging.basicConfig(level=cfg.get("log_level", "WARNING"), format="%(processName)s %(name)s: %(message)s")


def offsets_ns(spec: dict) -> np.ndarray:
    """Send offsets relative to the run start for a load spec."""
    kind = spec["kind"]
    if kind == "burst":
        return np.zeros(int(spec["total"]), dtype=np.int64)
    if kind == "rate":
        n = int(round(spec["rate"] * spec["duration_s"]))
        return (np.arange(n, dtype=np.float64) * (1e9 / spec["rate"])).astype(np.int64)
    if kind == "single":
        return (np.arange(int(spec["count"]), dtype=np.float64) * spec.get("interval_s", 1.0) * 1e9).astype(np.int64)
    if kind == "periodic":
        per_cycle = int(round(spec["rate"] * spec["period_s"] * spec.get("duty", 0.5)))
        k = np.arange(per_cycle, dtype=np.float64) * (1e9 / spec["rate"])
        cycles = [c * spec["period_s"] * 1e9 + k for c in range(int(spec.get("cycles", 2)))]
        return np.concatenate(cycles).astype(np.int64)
    raise ValueError(f"unknown load kind {kind!r}")


def send_schedule(
    sock, frames: list[bytes], offsets: np.ndarray, lead_ns: int = LEAD_NS, max_batch: int = MAX_BATCH, tick_ns: int = TICK_NS
):
    """Open-loop sender: every frame whose scheduled time has passed goes
    out in the next write, so a stalled connection is caught up on rather
    than silently thinned. Writes are coalesced to at most one per tick,
    which bounds wakeups at low rates; the added wait is part of the
    measured latency because stamps are scheduled times.

    Returns (t0_ns, actual send stamps).
    """
    n = len(frames)
    actual = np.empty(n, dtype=np.int64)
    t0 = time.time_ns() + lead_ns
    i = 0
    now_ns = time.time_ns
    sendall = sock.sendall
    while i < n:
        now = now_ns()
        due = int(np.searchsorted(offsets, now - t0, side="right"))
        if due > i:
            j = min(due, i + max_batch)
            actual[i:j] = now
            sendall(b"".join(frames[i:j]))
            i = j
            if j < due:
                continue  # behind schedule: keep writing
            wake = max(now + tick_ns, t0 + int(offsets[i])) if i < n else now
        else:
            wake = t0 + int(offsets[i])
        wait = (wake - now_ns()) / 1e9
        if wait > 0:
            time.sleep(wait)
    return t0, actual


def attestor_main(conn, cfg: dict) -> None:
    _logging(cfg)
    from ..attestor import Attestor, AttestorServer
    from ..crypto import new_signing_key
    from ..identity import default_policy

    platform_pub = verify_key_from_bytes(bytes.fromhex(cfg["platform_public"]))
    attestor = Attestor(default_policy(), [platform_pub], new_signing_key(), cfg.get("key_mode", "source"))
    server = AttestorServer(attestor, ("127.0.0.1", 0)).start()
    conn.send(("ready", server.address))
    try:
        conn.recv()
    except EOFError:
        pass
    server.stop()


def broker_main(conn, cfg: dict) -> None:
    _logging(cfg)
    from ..broker.server import Broker, BrokerConfig

    broker = Broker(BrokerConfig(**cfg["broker"]))
    asyncio.run(broker.serve(install_signals=True, on_ready=lambda addr: conn.send(("ready", addr))))


def producer_main(conn, cfg: dict) -> None:
    _logging(cfg)
    from ..attestor import attest, attestor_info
    from ..broker.client import BrokerClient
    from ..clients.authorizer import Authorizer, AuthorizerServer
    from ..clients.mdc import MDC, plaintext_process
    from ..clients.meter import Meter, MeterConfig, RandomWalk
    from ..crypto import new_signing_key
    from ..identity import role_code

    meter_id = cfg["meter_id"]
    control = BrokerClient(cfg["broker"])
    signing_key = new_signing_key()
    control.register(meter_id, signing_key)
    mdc = session = None
    grant_public = None
    if cfg["mode"] == SECURE:
        platform = Platform(signing_key_from_hex(cfg["platform_key"]), 1)
        session = attest(cfg["attestor"], platform, role_code(Role.PRODUCER), Role.PRODUCER)
        mdc = MDC(DataKey.generate(0), on_rotate=lambda k: session.deposit(meter_id, k))
        session.deposit(meter_id, mdc.dk)
        grant_public = bytes.fromhex(attestor_info(cfg["attestor"])["grant_public"])
    auth = AuthorizerServer(Authorizer(meter_id, signing_key, control, grant_public)).start()
    sock = connect(cfg["broker"], timeout=None, retries=20)
    meter = Meter(MeterConfig(meter_id, 1.0, RandomWalk(cfg.get("seed", 1))))
    conn.send(("ready", auth.address))
    while True:
        try:
            cmd = conn.recv()
        except EOFError:
            break
        if cmd[0] == "stop":
            break
        spec = cmd[1]
        offs = offsets_ns(spec)
        now_ms = time.time_ns() // 1_000_000
        ms = [meter.tick(now_ms) for _ in range(len(offs))]
        if mdc is not None:
            frames = [encode_publication(mdc.process(m)) for m in ms]
        else:
            frames = [encode_publication(plaintext_process(m)) for m in ms]
        first_seq = ms[0].seq if ms else meter.seq
        conn.send(("prepared", len(frames)))
        t0, actual = send_schedule(sock, frames, offs)
        conn.send(("sent", first_seq, t0, actual))
    sock.close()
    auth.stop()
    control.close()
    if session is not None:
        session.close()


def consumer_main(conn, cfg: dict) -> None:
    _logging(cfg)
    from ..clients.consumer import Consumer, ConsumerConfig
    from ..envelope import Measurement
    from ..identity import role_code

    secure = cfg["mode"] == SECURE
    ccfg = ConsumerConfig(
        cfg["subscriber_id"],
        cfg["broker"],
        {int(k): tuple(v) for k, v in cfg["publishers"].items()},
        frozenset({PrivacyLevel.HIGH}) if secure else PUBLIC_LEVELS,
        attestor=cfg.get("attestor"),
        platform=Platform(signing_key_from_hex(cfg["platform_key"]), 1) if secure else None,
        code=role_code(Role.CONSUMER),
    )
    consumer = Consumer(ccfg).start()
    conn.send(("ready", [s.to_dict() for s in consumer.subscriptions], consumer.stats.denied))
    while True:
        try:
            cmd = conn.recv()
        except EOFError:
            break
        if cmd[0] == "stop":
            break
        _, expected, idle_s, timeout_s = cmd
        seqs: list[int] = []
        meters: list[int] = []
        recv: list[int] = []
        deadline = time.monotonic() + timeout_s
        last = None
        while len(seqs) < expected and time.monotonic() < deadline:
            for d in consumer.deliveries(timeout=0.25):
                if isinstance(d.record, Measurement):
                    seqs.append(d.record.seq)
                    meters.append(d.record.meter_id)
                    recv.append(d.recv_ns)
                    last = time.monotonic()
                if len(seqs) >= expected:
                    break
            if last is not None and time.monotonic() - last > idle_s:
                break
        stats = consumer.stats
        conn.send(
            (
                "collected",
                np.asarray(seqs, dtype=np.int64),
                np.asarray(meters, dtype=np.int64),
                np.asarray(recv, dtype=np.int64),
                {"decoded": stats.decoded, "decode_failures": stats.decode_failures, "out_of_order": stats.out_of_order},
            )
        )
    consumer.close()
