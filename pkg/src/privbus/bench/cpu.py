"""Per-process CPU accounting."""
from __future__ import annotations

import threading
import time

import psutil


class ProcessGone(RuntimeError):
    pass


def sample_cpu(pid: int) -> float:
    """Cumulative user+system CPU time of ``pid`` in milliseconds."""
    try:
        t = psutil.Process(pid).cpu_times()
    except psutil.NoSuchProcess as exc:
        raise ProcessGone(f"process {pid} is gone") from exc
    return (t.user + t.system) * 1000.0


class CpuSampler:
    """Samples a set of processes at a fixed rate into ``rows``:
    ``(ts_us, role, pid, cpu_ms)``."""

    def __init__(self, pids: dict[str, int], hz: float = 1.0):
        self.pids = dict(pids)
        self.period = 1.0 / hz
        self.rows: list[tuple[int, str, int, float]] = []
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="cpu-sampler", daemon=True)

    def sample(self) -> None:
        ts = time.time_ns() // 1000
        for role, pid in self.pids.items():
            try:
                self.rows.append((ts, role, pid, round(sample_cpu(pid), 3)))
            except ProcessGone:
                pass

    def _run(self) -> None:
        while not self._stop.is_set():
            self.sample()
            self._stop.wait(self.period)

    def start(self) -> CpuSampler:
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(2)
        self.sample()
