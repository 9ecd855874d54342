"""Latency statistics and the shape detectors used to classify runs."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats as sps

# Latency growing faster than this (seconds of delay per second of sending)
# means the backlog is accumulating: the rate is not sustainable.
SLOPE_THRESHOLD = 0.1
PLATEAU_BAND = 0.5


@dataclass(frozen=True)
class LatencyStats:
    count: int
    mean_us: float
    p50_us: float
    p90_us: float
    p99_us: float
    max_us: float

    def to_dict(self) -> dict:
        return asdict(self)


def latency_stats(latency_us) -> LatencyStats:
    lat = np.asarray(latency_us, dtype=np.float64)
    if lat.size == 0:
        return LatencyStats(0, float("nan"), float("nan"), float("nan"), float("nan"), float("nan"))
    p50, p90, p99 = np.percentile(lat, [50, 90, 99])
    return LatencyStats(int(lat.size), float(lat.mean()), float(p50), float(p90), float(p99), float(lat.max()))


def latency_slope(send_ns, latency_us) -> float:
    """Least-squares slope of latency against send time, in s/s."""
    send = np.asarray(send_ns, dtype=np.float64)
    if send.size < 3 or np.ptp(send) == 0:
        return 0.0
    t = (send - send.min()) / 1e9
    lat = np.asarray(latency_us, dtype=np.float64) / 1e6
    return float(sps.linregress(t, lat).slope)


def is_sustainable(slope: float, threshold: float = SLOPE_THRESHOLD) -> bool:
    return slope < threshold


def is_monotone_classification(rates, sustainable) -> bool:
    """No sustainable rate above an unsustainable one."""
    seen_bad = False
    for _, ok in sorted(zip(rates, sustainable)):
        if not ok:
            seen_bad = True
        elif seen_bad:
            return False
    return True


def spearman(x, y) -> float:
    return float(sps.spearmanr(x, y).statistic)


@dataclass(frozen=True)
class Plateau:
    start_ns: int
    count: int
    p10_us: float
    p50_us: float
    p90_us: float

    @property
    def band_ratio(self) -> float:
        return (self.p90_us - self.p10_us) / self.p50_us if self.p50_us > 0 else float("inf")

    def bounded(self, band: float = PLATEAU_BAND) -> bool:
        return self.band_ratio <= band


def saturation_start(depth_ts_us, depth, capacity: int, fill: float = 0.9) -> int | None:
    """Wall time (ns) at which the ingress queue first reached ``fill`` of capacity."""
    depth = np.asarray(depth)
    hit = np.nonzero(depth >= fill * capacity)[0]
    if hit.size == 0:
        return None
    return int(np.asarray(depth_ts_us)[hit[0]]) * 1000


def service_rate(ts_us, delivered, depth, capacity: int, fill: float = 0.9) -> float | None:
    """Broker throughput (msg/s) over the samples where its ingress queue
    was at least ``fill`` full, i.e. while it was the bottleneck."""
    ts = np.asarray(ts_us, dtype=np.float64)
    sel = np.asarray(depth) >= fill * capacity
    if sel.sum() < 3 or np.ptp(ts[sel]) == 0:
        return None
    return float(sps.linregress(ts[sel] / 1e6, np.asarray(delivered, dtype=np.float64)[sel]).slope)


def detect_plateau(send_ns, latency_us, start_ns: int | None) -> Plateau | None:
    """Latency band of messages sent after the queue saturated.

    Messages sent before ``start_ns`` belong to the ramp phase.
    """
    if start_ns is None:
        return None
    send = np.asarray(send_ns)
    lat = np.asarray(latency_us, dtype=np.float64)
    sel = lat[send >= start_ns]
    if sel.size < 10:
        return None
    p10, p50, p90 = np.percentile(sel, [10, 50, 90])
    return Plateau(start_ns, int(sel.size), float(p10), float(p50), float(p90))


def cumulative_curves(sched_ns, recv_ns, t0_ns: int, window_ns: int, step_ns: int):
    """Ideal (scheduled) and actual (delivered) cumulative counts on a grid."""
    grid = np.arange(0, window_ns + 1, step_ns, dtype=np.int64)
    sched = np.sort(np.asarray(sched_ns, dtype=np.int64) - t0_ns)
    recv = np.sort(np.asarray(recv_ns, dtype=np.int64) - t0_ns)
    ideal = np.searchsorted(sched, grid, side="right")
    actual = np.searchsorted(recv, grid, side="right")
    return grid, ideal, actual


def curve_deviation_ms(grid_ns, ideal, actual) -> float:
    """Area between the cumulative curves per message, in ms.

    By Little's law this is the mean time a message spent undelivered
    within the window.
    """
    total = int(ideal[-1]) if len(ideal) else 0
    if total == 0:
        return 0.0
    gap = np.asarray(ideal, dtype=np.float64) - np.asarray(actual, dtype=np.float64)
    dt_ms = np.diff(np.asarray(grid_ns, dtype=np.float64)) / 1e6
    area = float(np.sum(gap[:-1] * dt_ms))
    return area / total
