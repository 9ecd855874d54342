"""Orchestrates attestor, broker, producer and consumer child processes."""
from __future__ import annotations

import logging
import multiprocessing as mp
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..broker.client import BrokerClient
from ..crypto import new_signing_key, public_bytes, signing_key_hex
from . import procs
from .cpu import CpuSampler, sample_cpu

log = logging.getLogger(__name__)

SECURE = procs.SECURE
REGULAR = procs.REGULAR


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    mode: str = SECURE
    capacity: int = 65536
    overhead_us: float = 0.0
    subscriber_buffer: int = 8192
    sample_hz: float = 200.0
    cpu_hz: float = 1.0
    meter_id: int = 1
    subscriber_id: int = 1000
    seed: int = 1
    workdir: str | None = None
    startup_timeout: float = 60.0
    log_level: str = "WARNING"

    def __post_init__(self) -> None:
        if self.mode not in (SECURE, REGULAR):
            raise ValueError(f"mode must be secure or regular, not {self.mode!r}")


@dataclass
class RawRun:
    """What one load command produced, before any analysis."""

    spec: dict
    first_seq: int
    t0_ns: int
    sched_ns: np.ndarray
    actual_ns: np.ndarray
    seqs: np.ndarray
    meters: np.ndarray
    recv_ns: np.ndarray
    consumer_stats: dict
    broker_cpu_ms: tuple[float, float]
    extra: dict = field(default_factory=dict)

    @property
    def sent(self) -> int:
        return len(self.sched_ns)

    def send_for(self, seqs: np.ndarray, scheduled: bool) -> np.ndarray:
        base = self.sched_ns if scheduled else self.actual_ns
        return base[seqs - self.first_seq]


class Pipeline:
    def __init__(self, cfg: PipelineConfig | None = None):
        self.cfg = cfg or PipelineConfig()
        self.ctx = mp.get_context("spawn")
        self.children: dict[str, tuple] = {}
        self.pids: dict[str, int] = {}
        self.addresses: dict[str, tuple] = {}
        self.workdir = Path(self.cfg.workdir or tempfile.mkdtemp(prefix="privbus-bench-"))
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.workdir / "broker_metrics.csv"
        self.platform_key = new_signing_key()
        self.cpu: CpuSampler | None = None
        self._control: BrokerClient | None = None

    @property
    def secure(self) -> bool:
        return self.cfg.mode == SECURE

    def _spawn(self, role: str, target, cfg: dict):
        parent, child = self.ctx.Pipe()
        proc = self.ctx.Process(target=target, args=(child, cfg), name=role, daemon=True)
        proc.start()
        child.close()
        self.children[role] = (proc, parent)
        self.pids[role] = proc.pid
        if not parent.poll(self.cfg.startup_timeout):
            raise PipelineError(f"{role} did not become ready")
        try:
            msg = parent.recv()
        except EOFError:
            raise PipelineError(f"{role} exited during startup") from None
        return msg

    def start(self) -> Pipeline:
        c = self.cfg
        key_hex = signing_key_hex(self.platform_key)
        common = {"log_level": c.log_level}
        if self.secure:
            _, addr = self._spawn(
                "attestor", procs.attestor_main, {**common, "platform_public": public_bytes(self.platform_key).hex()}
            )
            self.addresses["attestor"] = addr
        broker_cfg = {
            "host": "127.0.0.1",
            "port": 0,
            "capacity": c.capacity,
            "mode": c.mode,
            "overhead_us": c.overhead_us,
            "subscriber_buffer": c.subscriber_buffer,
            "sample_hz": c.sample_hz,
            "metrics_out": str(self.metrics_path),
        }
        if self.secure:
            broker_cfg.update(attestor=_fmt(self.addresses["attestor"]), platform_key=key_hex)
        _, addr = self._spawn("broker", procs.broker_main, {**common, "broker": broker_cfg})
        self.addresses["broker"] = addr
        base = {
            **common,
            "mode": c.mode,
            "broker": addr,
            "attestor": self.addresses.get("attestor"),
            "platform_key": key_hex,
        }
        _, auth = self._spawn("producer", procs.producer_main, {**base, "meter_id": c.meter_id, "seed": c.seed})
        self.addresses["authorizer"] = auth
        ready = self._spawn(
            "consumer",
            procs.consumer_main,
            {**base, "subscriber_id": c.subscriber_id, "publishers": {str(c.meter_id): auth}},
        )
        if ready[2]:
            raise PipelineError(f"consumer subscription denied: {ready[2]}")
        self._control = BrokerClient(addr)
        self.cpu = CpuSampler(self.pids, c.cpu_hz).start()
        return self

    def broker_cpu_ms(self) -> float:
        return sample_cpu(self.pids["broker"])

    def broker_metrics(self) -> dict:
        return self._control.metrics()

    def run(self, spec: dict, idle_s: float = 5.0, timeout_s: float = 600.0) -> RawRun:
        """Send one load spec and collect what the consumer received."""
        _, prod = self.children["producer"]
        _, cons = self.children["consumer"]
        expected = len(procs.offsets_ns(spec))
        cpu0 = self.broker_cpu_ms()
        since = self.sample_count()
        cons.send(("collect", expected, idle_s, timeout_s))
        prod.send(("send", spec))
        tag, _ = prod.recv()
        assert tag == "prepared"
        tag, first_seq, t0, actual = prod.recv()
        if not cons.poll(timeout_s + idle_s + 30):
            raise PipelineError("consumer did not report")
        tag, seqs, meters, recv, stats = cons.recv()
        cpu1 = self.broker_cpu_ms()
        sched = t0 + procs.offsets_ns(spec)
        series = self.broker_series(since)
        extra = {"depth": (series["ts_us"], series["queue_depth"]), "delivered": series["delivered"]}
        return RawRun(spec, first_seq, t0, sched, actual, seqs, meters, recv, stats, (cpu0, cpu1), extra)

    def broker_series(self, since: int = 0) -> dict[str, np.ndarray]:
        """Broker metric samples from row ``since`` on, one array per column."""
        columns, rows, _ = self._control.samples(since)
        wanted = ("ts_us", "published", "delivered", "rejected", "queue_depth")
        return {c: np.asarray([r[columns.index(c)] for r in rows], dtype=np.int64) for c in wanted}

    def depth_series(self, since: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Broker queue-depth samples ``(ts_us, depth)`` from row ``since`` on."""
        s = self.broker_series(since)
        return s["ts_us"], s["queue_depth"]

    def sample_count(self) -> int:
        return self._control.samples(1 << 62)[2]

    def stop(self) -> None:
        if self.cpu is not None:
            self.cpu.stop()
        if self._control is not None:
            self._control.close()
        for role in ("consumer", "producer", "broker", "attestor"):
            if role not in self.children:
                continue
            proc, conn = self.children[role]
            if role == "broker":
                proc.terminate()  # SIGTERM: the broker writes its metrics CSV
            else:
                try:
                    conn.send(("stop",))
                except (OSError, BrokenPipeError):
                    pass
            proc.join(15)
            if proc.is_alive():
                proc.kill()
                proc.join(5)
            conn.close()
        self.children.clear()

    def __enter__(self) -> Pipeline:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def _fmt(addr) -> str:
    return f"{addr[0]}:{addr[1]}"


def cpu_count() -> int:
    return os.cpu_count() or 1
