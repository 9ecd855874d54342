"""Broker counters, latency histogram and the sampled time series."""
from __future__ import annotations

import csv
import threading
import time
from dataclasses import asdict, dataclass

CSV_COLUMNS = ["ts_us", "published", "delivered", "rejected", "queue_depth", "lat_p50_us", "lat_p99_us", "cpu_ms"]

_SUB = 16  # sub-buckets per power of two


def _bucket(value_us: int) -> int:
    if value_us < _SUB:
        return max(value_us, 0)
    exp = value_us.bit_length() - 5  # keeps 4 significant bits
    return (exp + 1) * _SUB + ((value_us >> exp) - _SUB)


def _bucket_upper(idx: int) -> int:
    if idx < _SUB:
        return idx
    exp = idx // _SUB - 1
    return ((idx % _SUB + _SUB + 1) << exp) - 1


class LatencyHistogram:
    """Log-linear histogram (about 6% relative error), microsecond units."""

    def __init__(self) -> None:
        self.counts = [0] * (_SUB * 40)
        self.total = 0

    def record(self, value_us: int) -> None:
        self.counts[min(_bucket(value_us), len(self.counts) - 1)] += 1
        self.total += 1

    def snapshot(self) -> list[int]:
        return list(self.counts)

    @staticmethod
    def percentile(counts: list[int], q: float) -> int | None:
        total = sum(counts)
        if total == 0:
            return None
        rank = max(1, int(round(q / 100.0 * total)))
        acc = 0
        for idx, c in enumerate(counts):
            acc += c
            if acc >= rank:
                return _bucket_upper(idx)
        return _bucket_upper(len(counts) - 1)


@dataclass(frozen=True)
class BrokerMetrics:
    published: int
    delivered: int
    rejected: int
    queue_depth: int
    capacity: int
    undeliverable: int
    disconnects: int
    lat_p50_us: int | None
    lat_p99_us: int | None
    cpu_ms: float
    per_publisher: dict

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_publisher"] = {str(k): v for k, v in self.per_publisher.items()}
        return d


class Counters:
    """Mutated only by the event-loop thread; read by snapshots."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.published = 0
        self.delivered = 0
        self.rejected = 0
        self.undeliverable = 0
        self.disconnects = 0
        self.per_publisher: dict[int, int] = {}
        self.latency = LatencyHistogram()


class Sampler:
    """Background thread recording one CSV row per tick."""

    def __init__(self, counters: Counters, depth, hz: float = 200.0):
        self.counters = counters
        self.depth = depth
        self.period = 1.0 / hz
        self.rows: list[list] = []
        self._prev = counters.latency.snapshot()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="metrics-sampler", daemon=True)

    def start(self) -> Sampler:
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2)

    def sample(self) -> list:
        c = self.counters
        now = c.latency.snapshot()
        window = [a - b for a, b in zip(now, self._prev)]
        self._prev = now
        row = [
            time.time_ns() // 1000,
            c.published,
            c.delivered,
            c.rejected,
            self.depth(),
            LatencyHistogram.percentile(window, 50),
            LatencyHistogram.percentile(window, 99),
            round(time.process_time() * 1000, 3),
        ]
        self.rows.append(row)
        return row

    def _run(self) -> None:
        next_at = time.monotonic()
        while not self._stop.is_set():
            self.sample()
            next_at += self.period
            delay = next_at - time.monotonic()
            if delay > 0:
                self._stop.wait(delay)
            else:
                next_at = time.monotonic()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for row in self.rows:
                w.writerow(["" if v is None else v for v in row])
