"""Smart-meter simulator."""
from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Union

from ..envelope import Measurement


@dataclass(frozen=True)
class Constant:
    value_mw: int


@dataclass(frozen=True)
class RandomWalk:
    seed: int
    step: int = 250
    start_mw: int = 500_000


ValueModel = Union[Constant, RandomWalk]


@dataclass(frozen=True)
class MeterConfig:
    meter_id: int
    rate_hz: float = 1.0
    value_model: ValueModel = field(default_factory=lambda: Constant(1000))

    def __post_init__(self) -> None:
        if not self.rate_hz > 0:
            raise ValueError("rate_hz must be positive")


class Meter:
    def __init__(self, cfg: MeterConfig, start_seq: int = 0):
        self.cfg = cfg
        self.seq = start_seq
        model = cfg.value_model
        if isinstance(model, RandomWalk):
            self._rng = random.Random(model.seed)
            self._value = model.start_mw
        else:
            self._rng = None
            self._value = model.value_mw

    def _next_value(self) -> int:
        if self._rng is not None:
            step = self.cfg.value_model.step
            self._value = max(0, self._value + self._rng.randint(-step, step))
        return self._value

    def tick(self, now_ms: int | None = None) -> Measurement:
        if now_ms is None:
            now_ms = time.time_ns() // 1_000_000
        m = Measurement(self.cfg.meter_id, now_ms, self._next_value(), self.seq)
        self.seq += 1
        return m


def meter_tick(meter: Meter, now_ms: int | None = None) -> Measurement:
    return meter.tick(now_ms)


def paced(
    meter: Meter,
    count: int,
    clock: Callable[[], float] = time.monotonic,
    sleep: Callable[[float], None] = time.sleep,
    wall_ms: Callable[[], int] | None = None,
) -> Iterator[Measurement]:
    """Yield ``count`` measurements on a fixed schedule of ``1/rate_hz``.

    The schedule is absolute, so a late tick does not push later ones back.
    """
    period = 1.0 / meter.cfg.rate_hz
    start = clock()
    for i in range(count):
        due = start + i * period
        delay = due - clock()
        if delay > 0:
            sleep(delay)
        yield meter.tick(wall_ms() if wall_ms else None)
