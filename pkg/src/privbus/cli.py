"""Command line entry point: ``privbus <role> [options]``.

A JSON config file (``--config``) may supply per-role sections::

    {"platform_key": "<hex>",
     "broker": {"listen": "127.0.0.1:7474", "capacity": 65536},
     "attestor": {"listen": "127.0.0.1:7475", "policy": "policy.json"},
     "aggregator": {"window_ms": 3600000, "grace_ms": 2000, "regions": {"1": 0}}}

Command-line flags override the file.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from .attestation import Platform, Policy
from .crypto import new_signing_key, public_bytes, signing_key_from_hex, signing_key_hex, verify_key_from_bytes
from .envelope import PrivacyLevel
from .wire import parse_addr

log = logging.getLogger("privbus")


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _levels(s: str) -> frozenset[PrivacyLevel]:
    return frozenset(PrivacyLevel.parse(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _publisher(s: str) -> tuple[int, tuple[str, int]]:
    pid, _, addr = s.partition("=")
    if not addr:
        raise argparse.ArgumentTypeError("expected ID=HOST:PORT")
    return int(pid), parse_addr(addr)


def _platform(args, conf: dict) -> Platform | None:
    key = args.platform_key or conf.get("platform_key")
    if not key:
        return None
    return Platform(signing_key_from_hex(key), 1)


def _wait_for_signal() -> None:
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    done.wait()


# -- roles -----------------------------------------------------------------


def cmd_keygen(args, conf) -> int:
    key = new_signing_key()
    print(json.dumps({"platform_key": signing_key_hex(key), "platform_public": public_bytes(key).hex()}))
    return 0


def cmd_policy(args, conf) -> int:
    from .identity import default_policy

    print(json.dumps(default_policy().to_dict(), indent=2))
    return 0


def cmd_attestor(args, conf) -> int:
    from .attestor import Attestor, AttestorServer
    from .identity import default_policy

    section = conf.get("attestor", {})
    policy_path = args.policy or section.get("policy")
    policy = Policy.load(policy_path) if policy_path else default_policy()
    publics = list(args.platform_public or section.get("platform_public", []))
    if not publics and conf.get("platform_key"):
        publics = [public_bytes(signing_key_from_hex(conf["platform_key"])).hex()]
    if not publics:
        print("attestor: at least one --platform-public key is required", file=sys.stderr)
        return 2
    attestor = Attestor(
        policy, [verify_key_from_bytes(bytes.fromhex(h)) for h in publics], new_signing_key(), args.key_mode
    )
    server = AttestorServer(attestor, parse_addr(args.listen or section.get("listen", "127.0.0.1:7475"))).start()
    print(f"attestor listening on {server.address[0]}:{server.address[1]}", flush=True)
    _wait_for_signal()
    server.stop()
    return 0


def cmd_broker(args, conf) -> int:
    from .broker.server import Broker, BrokerConfig

    section = dict(conf.get("broker", {}))
    listen = section.pop("listen", "127.0.0.1:7474")
    if args.listen:
        listen = args.listen
    host, port = parse_addr(listen)
    for name in ("mode", "capacity", "metrics_out", "attestor", "key_mode"):
        value = getattr(args, name)
        if value is not None:
            section[name] = value
    if args.platform_key or conf.get("platform_key"):
        section["platform_key"] = args.platform_key or conf["platform_key"]
    broker = Broker(BrokerConfig(host=host, port=port, **section))

    def ready(addr):
        print(f"broker listening on {addr[0]}:{addr[1]}", flush=True)

    asyncio.run(broker.serve(install_signals=True, on_ready=ready))
    return 0


def cmd_dispatcher(args, conf) -> int:
    from .clients.dispatcher import Dispatcher

    d = Dispatcher(parse_addr(args.broker), parse_addr(args.listen)).start()
    print(f"dispatcher listening on {d.address[0]}:{d.address[1]}", flush=True)
    _wait_for_signal()
    d.stop()
    return 0


def cmd_producer(args, conf) -> int:
    from .clients.meter import RandomWalk
    from .clients.producer import Producer, ProducerConfig

    cfg = ProducerConfig(
        args.meter_id,
        parse_addr(args.broker),
        args.rate,
        args.mode,
        attestor=parse_addr(args.attestor) if args.attestor else None,
        platform=_platform(args, conf),
        dispatcher=parse_addr(args.dispatcher) if args.dispatcher else None,
        auth_listen=parse_addr(args.auth_listen),
        value_model=RandomWalk(args.seed),
    )
    with Producer(cfg) as p:
        print(f"producer {args.meter_id} authorizing on {p.auth_address[0]}:{p.auth_address[1]}", flush=True)
        if args.count:
            p.run(args.count)
        else:
            try:
                while True:
                    p.run(max(1, int(args.rate)))
            except KeyboardInterrupt:
                pass
    return 0


def cmd_consumer(args, conf) -> int:
    from .attestation import Role
    from .clients.consumer import ConsumerConfig, consumer_run, delivery_row, write_csv
    from .identity import role_code

    platform = _platform(args, conf)
    cfg = ConsumerConfig(
        args.subscriber_id,
        parse_addr(args.broker),
        dict(args.publisher),
        _levels(args.levels),
        args.topic,
        attestor=parse_addr(args.attestor) if args.attestor else None,
        platform=platform,
        code=role_code(Role.CONSUMER) if platform else None,
    )
    stream = consumer_run(cfg, timeout=args.timeout, idle=args.idle)
    if args.count:
        stream = _take(stream, args.count)
    if args.out:
        n = write_csv(args.out, stream)
        print(f"wrote {n} records to {args.out}")
    else:
        for d in stream:
            row = delivery_row(d)
            print(",".join(map(str, row)) if row else d.record, flush=True)
    return 0


def _take(it, n: int):
    for i, x in enumerate(it):
        yield x
        if i + 1 >= n:
            return


def cmd_aggregator(args, conf) -> int:
    from .aggregator import AggregatorConfig, write_audit
    from .aggregator_service import AggregatorService

    platform = _platform(args, conf)
    if platform is None or not args.attestor:
        print("aggregator: needs --attestor and a platform key", file=sys.stderr)
        return 2
    svc = AggregatorService(
        args.publisher_id,
        parse_addr(args.broker),
        parse_addr(args.attestor),
        platform,
        dict(args.publisher),
        AggregatorConfig.from_dict(conf.get("aggregator", {})),
        auth_listen=parse_addr(args.auth_listen),
    ).start()
    print(f"aggregator {args.publisher_id} authorizing on {svc.auth_address[0]}:{svc.auth_address[1]}", flush=True)
    try:
        svc.run(args.duration)
    except KeyboardInterrupt:
        pass
    svc.stop(flush=True)
    if args.audit:
        write_audit(args.audit, svc.aggregator.audit)
    return 0


def cmd_hebench(args, conf) -> int:
    from . import hebaseline as he

    params = he.GroupParams.small() if args.group == "small" else he.GroupParams.rfc3526_2048()

    def progress(row):
        if args.verbose:
            print(",".join(map(str, row.as_tuple())), file=sys.stderr, flush=True)

    rows = he.he_benchmark(_ints(args.sizes), args.runs, params, seed=args.seed, progress=progress)
    he.write_csv(args.out, rows)
    for s in he.summarize(rows):
        print(f"{s['scheme']:>9} size={s['size']:<5} mean={s['mean_us'] / 1000:.3f} ms sd={s['stdev_us'] / 1000:.3f} ms")
    return 0


def cmd_bench(args, conf) -> int:
    from .bench import Burst, PeriodicBurst, RateSweep, Scenario, SingleMessage, run_scenario

    if args.scenario == "single":
        kind = SingleMessage(args.count or 60)
    elif args.scenario == "burst":
        kind = Burst(args.total or (1_000_000 if args.full else 100_000))
    elif args.scenario == "sweep":
        if not args.rates:
            print("bench: --rates is required for a sweep", file=sys.stderr)
            return 2
        kind = RateSweep(tuple(_floats(args.rates)))
    else:
        rate = _floats(args.rates)[0] if args.rates else 10_000.0
        kind = PeriodicBurst(rate, args.period)
    repeats = args.repeats if args.repeats is not None else (60 if args.full else 10)
    sc = Scenario(kind, args.mode, repeats, args.duration)
    reports = run_scenario(sc, args.out)
    for r in reports:
        s = r.stats
        print(
            f"{r.scenario} rate={r.rate} repeat={r.repeat} sent={r.sent} recv={r.received} "
            f"p50={s.p50_us:.0f}us p99={s.p99_us:.0f}us max={s.max_us:.0f}us"
        )
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="privbus", description="Privacy-tiered pub/sub for metering telemetry.")
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("keygen", help="print a fresh platform key pair").set_defaults(fn=cmd_keygen)
    sub.add_parser("policy", help="print the default attestation policy").set_defaults(fn=cmd_policy)

    p = sub.add_parser("attestor", help="run the attestation authority")
    p.add_argument("--listen")
    p.add_argument("--policy", help="JSON map {role: [hex digests]}")
    p.add_argument("--platform-public", action="append", help="trusted platform public key (hex)")
    p.add_argument("--key-mode", choices=("source", "broker"), default="source")
    p.set_defaults(fn=cmd_attestor)

    p = sub.add_parser("broker", help="run the broker")
    p.add_argument("--listen")
    p.add_argument("--mode", choices=("secure", "regular"))
    p.add_argument("--capacity", type=int)
    p.add_argument("--metrics-out")
    p.add_argument("--attestor")
    p.add_argument("--platform-key")
    p.add_argument("--key-mode", choices=("source", "broker"))
    p.set_defaults(fn=cmd_broker)

    p = sub.add_parser("dispatcher", help="run an untrusted relay in front of the broker")
    p.add_argument("--broker", required=True)
    p.add_argument("--listen", default="127.0.0.1:7476")
    p.set_defaults(fn=cmd_dispatcher)

    p = sub.add_parser("producer", help="run a meter and its collector")
    p.add_argument("--meter-id", type=int, required=True)
    p.add_argument("--rate", type=float, default=1.0)
    p.add_argument("--broker", required=True)
    p.add_argument("--attestor")
    p.add_argument("--platform-key")
    p.add_argument("--mode", choices=("secure", "regular"), default="secure")
    p.add_argument("--dispatcher")
    p.add_argument("--auth-listen", default="127.0.0.1:0")
    p.add_argument("--count", type=int, default=0, help="stop after this many (0 = run forever)")
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(fn=cmd_producer)

    p = sub.add_parser("consumer", help="subscribe and decode")
    p.add_argument("--subscriber-id", type=int, required=True)
    p.add_argument("--broker", required=True)
    p.add_argument("--publisher", type=_publisher, action="append", default=[], metavar="ID=HOST:PORT")
    p.add_argument("--levels", default="low")
    p.add_argument("--topic", default="*")
    p.add_argument("--attestor")
    p.add_argument("--platform-key")
    p.add_argument("--out", help="write decoded measurements as CSV")
    p.add_argument("--count", type=int, default=0)
    p.add_argument("--timeout", type=float)
    p.add_argument("--idle", type=float)
    p.set_defaults(fn=cmd_consumer)

    p = sub.add_parser("aggregator", help="run the windowed aggregator")
    p.add_argument("--publisher-id", type=int, required=True)
    p.add_argument("--broker", required=True)
    p.add_argument("--attestor")
    p.add_argument("--platform-key")
    p.add_argument("--publisher", type=_publisher, action="append", default=[], metavar="ID=HOST:PORT")
    p.add_argument("--auth-listen", default="127.0.0.1:0")
    p.add_argument("--duration", type=float)
    p.add_argument("--audit", help="write the audit CSV here on exit")
    p.set_defaults(fn=cmd_aggregator)

    p = sub.add_parser("hebench", help="homomorphic vs symmetric aggregation timings")
    p.add_argument("--sizes", default="10,50,100,200,400,800,1000")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--group", choices=("2048", "small"), default="2048")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(fn=cmd_hebench)

    p = sub.add_parser("bench", help="run an evaluation scenario")
    p.add_argument("--scenario", choices=("single", "burst", "sweep", "periodic"), required=True)
    p.add_argument("--mode", choices=("secure", "regular"), default="secure")
    p.add_argument("--rates", help="comma-separated msg/s")
    p.add_argument("--repeats", type=int)
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--total", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--period", type=float, default=1.0)
    p.add_argument("--full", action="store_true", help="full-scale profile: 10^6 burst, 60 repeats")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    return args.fn(args, load_config(args.config))


if __name__ == "__main__":
    sys.exit(main())
