"""Evaluation scenarios and their reports.

Latency is measured from the producer's send timestamp to the consumer's
receive timestamp, both read from the host wall clock. Bursts stamp each
message when it is handed to the socket; paced scenarios stamp it with
its scheduled time, so a sender held back by the broker accrues the delay
instead of hiding it.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import stats as st
from .pipeline import Pipeline, RawRun

log = logging.getLogger(__name__)

# Figures observed in the original testbed; kept as reference metadata only.
REFERENCE = {
    "burst_total": 1_000_000,
    "burst_regular_s": 53,
    "burst_secure_extra_s": 7,
    "plateau_ms": (900, 1000),
    "max_rate": 20000,
    "rates": (1000, 2500, 5000, 10000, 15000, 20000),
}

SAMPLE_COLUMNS = ("scenario", "mode", "rate", "seq", "send_us", "recv_us", "latency_us")
SUMMARY_COLUMNS = (
    "scenario",
    "mode",
    "rate",
    "repeat",
    "sent",
    "received",
    "duplicates",
    "mean_us",
    "p50_us",
    "p90_us",
    "p99_us",
    "max_us",
    "slope",
    "sustainable",
    "broker_cpu_ms",
    "saturation_rate",
    "deviation_ms",
)
CPU_COLUMNS = ("ts_us", "role", "pid", "cpu_ms")
IDEAL_COLUMNS = ("mode", "rate", "cycle", "t_ms", "ideal", "actual")


@dataclass(frozen=True)
class SingleMessage:
    count: int = 60
    interval_s: float = 1.0


@dataclass(frozen=True)
class Burst:
    total: int = 100_000


@dataclass(frozen=True)
class RateSweep:
    rates: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.rates:
            raise ValueError("a rate sweep needs at least one rate")


@dataclass(frozen=True)
class PeriodicBurst:
    rate: float
    period_s: float = 1.0
    duty: float = 0.5
    cycles: int = 2


Kind = Union[SingleMessage, Burst, RateSweep, PeriodicBurst]


@dataclass(frozen=True)
class Scenario:
    kind: Kind
    mode: str = "secure"
    repeats: int = 1
    duration_s: float = 10.0

    def __post_init__(self) -> None:
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")


@dataclass
class RunReport:
    scenario: str
    mode: str
    rate: float | None
    repeat: int
    seq: np.ndarray
    send_ns: np.ndarray
    recv_ns: np.ndarray
    sent: int
    stats: st.LatencyStats
    broker_cpu_ms: float
    duplicates: int = 0
    out_of_order: int = 0
    decode_failures: int = 0
    slope: float | None = None
    sustainable: bool | None = None
    saturation_rate: float | None = None
    plateau: st.Plateau | None = None
    deviation_ms: float | None = None
    curves: list[tuple] = field(default_factory=list)
    cpu: list[tuple] = field(default_factory=list)
    raw: RawRun | None = None

    @property
    def latency_us(self) -> np.ndarray:
        return _latency_us(self.send_ns, self.recv_ns)

    @property
    def received(self) -> int:
        return len(self.seq)

    @property
    def lost(self) -> int:
        return self.sent - len(np.unique(self.seq))

    def summary_row(self) -> tuple:
        s = self.stats

        def r(x):
            return "" if x is None else round(float(x), 3)

        return (
            self.scenario,
            self.mode,
            r(self.rate),
            self.repeat,
            self.sent,
            self.received,
            self.duplicates,
            r(s.mean_us),
            r(s.p50_us),
            r(s.p90_us),
            r(s.p99_us),
            r(s.max_us),
            r(self.slope),
            "" if self.sustainable is None else int(self.sustainable),
            r(self.broker_cpu_ms),
            r(self.saturation_rate),
            r(self.deviation_ms),
        )


def _latency_us(send_ns, recv_ns) -> np.ndarray:
    # Whole microseconds, exactly as written to samples.csv.
    return recv_ns // 1000 - send_ns // 1000


def build_report(raw: RawRun, scenario: str, mode: str, rate: float | None, repeat: int, scheduled: bool) -> RunReport:
    seqs = raw.seqs
    idx = seqs - raw.first_seq
    valid = (idx >= 0) & (idx < raw.sent)
    if not valid.all():
        log.warning("%d deliveries outside the run's sequence range", int((~valid).sum()))
    seqs, recv = seqs[valid], raw.recv_ns[valid]
    send = raw.send_for(seqs, scheduled)
    lat = _latency_us(send, recv)
    return RunReport(
        scenario,
        mode,
        rate,
        repeat,
        seqs,
        send,
        recv,
        raw.sent,
        st.latency_stats(lat),
        raw.broker_cpu_ms[1] - raw.broker_cpu_ms[0],
        duplicates=len(seqs) - len(np.unique(seqs)),
        out_of_order=int(raw.consumer_stats.get("out_of_order", 0)),
        decode_failures=int(raw.consumer_stats.get("decode_failures", 0)),
        raw=raw,
    )


def run_single(p: Pipeline, count: int = 60, interval_s: float = 1.0) -> RunReport:
    raw = p.run({"kind": "single", "count": count, "interval_s": interval_s}, idle_s=max(5.0, 3 * interval_s))
    return build_report(raw, "single", p.cfg.mode, 1.0 / interval_s, 0, scheduled=False)


def run_burst(p: Pipeline, total: int = 100_000, repeat: int = 0) -> RunReport:
    raw = p.run({"kind": "burst", "total": total}, idle_s=10.0)
    rep = build_report(raw, "burst", p.cfg.mode, None, repeat, scheduled=False)
    depth_ts, depth = raw.extra["depth"]
    start = st.saturation_start(depth_ts, depth, p.cfg.capacity)
    rep.plateau = st.detect_plateau(rep.send_ns, rep.latency_us, start)
    rate = st.service_rate(depth_ts, raw.extra["delivered"], depth, p.cfg.capacity)
    rep.saturation_rate = rate if rate is not None else delivered_rate(rep, start)
    return rep


def delivered_rate(rep: RunReport, start_ns: int | None = None) -> float:
    """Delivery throughput while the broker was saturated and the producer
    was still sending.

    Once the sender stops, the pipeline no longer shares the host with it
    and drains faster than it could sustain under load, so that tail is
    left out when it can be.
    """
    recv = np.sort(rep.recv_ns)
    lo = recv[0] if start_ns is None else max(int(recv[0]), start_ns)
    hi = int(rep.raw.actual_ns.max()) if rep.raw is not None else int(recv[-1])
    sel = recv[(recv >= lo) & (recv <= hi)]
    if len(sel) < 1000:
        sel = recv[recv >= lo] if start_ns is not None else recv
    if len(sel) < 2 or sel[-1] == sel[0]:
        return float("nan")
    return (len(sel) - 1) / ((sel[-1] - sel[0]) / 1e9)


def offered_rate(rep: RunReport, start_ns: int | None) -> float:
    """Rate at which the producer emitted messages before the broker pushed back."""
    send = np.sort(rep.raw.actual_ns)
    if start_ns is not None:
        send = send[send < start_ns]
    if len(send) < 2 or send[-1] == send[0]:
        return float("nan")
    return (len(send) - 1) / ((send[-1] - send[0]) / 1e9)


def ladder(saturation: float, steps: int = 7, low: float = 0.1, high: float = 2.0) -> tuple[float, ...]:
    """Geometric rate ladder from ``low`` to ``high`` times saturation."""
    return tuple(float(r) for r in np.round(np.geomspace(low * saturation, high * saturation, steps)))


@dataclass
class SweepResult:
    reports: list[RunReport]
    rates: tuple[float, ...]
    slope: dict[float, float]
    sustainable: dict[float, bool]
    cpu_ms: dict[float, float]

    @property
    def monotone(self) -> bool:
        return st.is_monotone_classification(self.rates, [self.sustainable[r] for r in self.rates])

    @property
    def max_sustainable(self) -> float | None:
        ok = [r for r in self.rates if self.sustainable[r]]
        return max(ok) if ok else None

    def cpu_spearman(self) -> float:
        ok = [r for r in self.rates if self.sustainable[r]]
        if len(ok) < 3:
            return float("nan")
        return st.spearman(ok, [self.cpu_ms[r] for r in ok])


def run_rate_sweep(p: Pipeline, rates: Sequence[float], repeats: int = 10, duration_s: float = 10.0) -> SweepResult:
    reports = []
    for repeat in range(repeats):
        for rate in rates:
            raw = p.run({"kind": "rate", "rate": rate, "duration_s": duration_s}, idle_s=10.0)
            rep = build_report(raw, "sweep", p.cfg.mode, rate, repeat, scheduled=True)
            rep.slope = st.latency_slope(rep.send_ns, rep.latency_us)
            rep.sustainable = st.is_sustainable(rep.slope)
            reports.append(rep)
    rates = tuple(sorted(rates))
    slope, ok, cpu = {}, {}, {}
    for rate in rates:
        mine = [r for r in reports if r.rate == rate]
        slope[rate] = float(np.median([r.slope for r in mine]))
        ok[rate] = st.is_sustainable(slope[rate])
        cpu[rate] = float(np.mean([r.broker_cpu_ms for r in mine]))
    return SweepResult(reports, rates, slope, ok, cpu)


def run_periodic(
    p: Pipeline, rate: float, period_s: float = 1.0, duty: float = 0.5, cycles: int = 2, step_ms: float = 5.0
) -> RunReport:
    spec = {"kind": "periodic", "rate": rate, "period_s": period_s, "duty": duty, "cycles": cycles}
    raw = p.run(spec, idle_s=10.0)
    rep = build_report(raw, "periodic", p.cfg.mode, rate, 0, scheduled=True)
    window_ns = int(cycles * period_s * 1e9)
    grid, ideal, actual = st.cumulative_curves(rep.send_ns, rep.recv_ns, raw.t0_ns, window_ns, int(step_ms * 1e6))
    rep.deviation_ms = st.curve_deviation_ms(grid, ideal, actual)
    period_ns = int(period_s * 1e9)
    rep.curves = [
        (p.cfg.mode, rate, min(int(t // period_ns), cycles - 1), round(t / 1e6, 3), int(i), int(a))
        for t, i, a in zip(grid, ideal, actual)
    ]
    return rep


# -- output ----------------------------------------------------------------


def write_samples(path: str | Path, reports: Sequence[RunReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLE_COLUMNS)
        for r in reports:
            rate = "" if r.rate is None else r.rate
            send_us = r.send_ns // 1000
            recv_us = r.recv_ns // 1000
            for seq, s, v in zip(r.seq.tolist(), send_us.tolist(), recv_us.tolist()):
                w.writerow((r.scenario, r.mode, rate, seq, s, v, v - s))


def write_summary(path: str | Path, reports: Sequence[RunReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in reports:
            w.writerow(r.summary_row())


def write_cpu(path: str | Path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CPU_COLUMNS)
        w.writerows(rows)


def write_ideal_vs_actual(path: str | Path, reports: Sequence[RunReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IDEAL_COLUMNS)
        for r in reports:
            w.writerows(r.curves)


def run_scenario(sc: Scenario, out_dir: str | Path, pipeline_cfg=None) -> list[RunReport]:
    """Run one scenario end to end and write its CSV outputs to ``out_dir``."""
    from .pipeline import PipelineConfig

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = pipeline_cfg or PipelineConfig(mode=sc.mode, workdir=str(out / "work"))
    reports: list[RunReport] = []
    with Pipeline(cfg) as p:
        k = sc.kind
        for repeat in range(sc.repeats if not isinstance(k, RateSweep) else 1):
            if isinstance(k, SingleMessage):
                rep = run_single(p, k.count, k.interval_s)
                rep.repeat = repeat
                reports.append(rep)
            elif isinstance(k, Burst):
                reports.append(run_burst(p, k.total, repeat))
            elif isinstance(k, PeriodicBurst):
                rep = run_periodic(p, k.rate, k.period_s, k.duty, k.cycles)
                rep.repeat = repeat
                reports.append(rep)
        if isinstance(k, RateSweep):
            reports.extend(run_rate_sweep(p, k.rates, sc.repeats, sc.duration_s).reports)
        cpu_rows = list(p.cpu.rows) if p.cpu else []
    write_samples(out / "samples.csv", reports)
    write_summary(out / "summary.csv", reports)
    write_cpu(out / "cpu.csv", cpu_rows)
    write_ideal_vs_actual(out / "ideal_vs_actual.csv", [r for r in reports if r.curves])
    return reports
