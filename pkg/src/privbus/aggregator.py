"""Windowed aggregation of raw measurements and tiered republication.

Per-meter averages are billing data and go out at Moderate, encrypted.
Regional averages are public and go out at Low in plaintext. Arithmetic is
integer throughout: sums are exact and means are floored.
"""
from __future__ import annotations

import csv
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

from .crypto import DataKey, seal_counter_payload
from .envelope import (
    KIND_AGGREGATE,
    KIND_MEASUREMENT,
    EncryptionMode,
    Measurement,
    PrivacyLevel,
    Publication,
    RecordError,
)

log = logging.getLogger(__name__)

U128_MAX = (1 << 128) - 1
DEFAULT_WINDOW_MS = 3_600_000
DEFAULT_GRACE_MS = 2000

SCOPE_METER = 0
SCOPE_REGION = 1

# kind, start_ms, duration_ms, scope, scope_id, sum lo, sum hi, count, mean
_AGGREGATE = struct.Struct("<BQQBQQQQQ")
AGGREGATE_SIZE = _AGGREGATE.size + 4


@dataclass(frozen=True, order=True)
class Window:
    start_ms: int
    duration_ms: int = DEFAULT_WINDOW_MS

    def __post_init__(self) -> None:
        if self.duration_ms < 1:
            raise ValueError("window duration must be positive")
        if self.start_ms < 0 or self.start_ms % self.duration_ms:
            raise ValueError(f"window start {self.start_ms} is not aligned to {self.duration_ms} ms")

    @property
    def end_ms(self) -> int:
        return self.start_ms + self.duration_ms

    @classmethod
    def containing(cls, ts_ms: int, duration_ms: int = DEFAULT_WINDOW_MS) -> Window:
        return cls(ts_ms - ts_ms % duration_ms, duration_ms)


@dataclass(frozen=True)
class PerMeter:
    meter_id: int


@dataclass(frozen=True)
class Regional:
    region_id: int


Scope = Union[PerMeter, Regional]


@dataclass(frozen=True)
class AggregateRecord:
    window: Window
    scope: Scope
    sum_mw: int
    count: int
    mean_mw: int = field(default=-1)

    def __post_init__(self) -> None:
        if not 0 <= self.sum_mw <= U128_MAX:
            raise ValueError("sum_mw must fit in 128 unsigned bits")
        if not 1 <= self.count < 1 << 64:
            raise ValueError("count must be in [1, 2**64)")
        mean = self.sum_mw // self.count
        if self.mean_mw == -1:
            object.__setattr__(self, "mean_mw", mean)
        elif self.mean_mw != mean:
            raise ValueError(f"mean_mw {self.mean_mw} != floor(sum/count) = {mean}")

    def to_bytes(self) -> bytes:
        if isinstance(self.scope, PerMeter):
            scope, sid = SCOPE_METER, self.scope.meter_id
        else:
            scope, sid = SCOPE_REGION, self.scope.region_id
        body = _AGGREGATE.pack(
            KIND_AGGREGATE,
            self.window.start_ms,
            self.window.duration_ms,
            scope,
            sid,
            self.sum_mw & 0xFFFFFFFFFFFFFFFF,
            self.sum_mw >> 64,
            self.count,
            self.mean_mw,
        )
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> AggregateRecord:
        if len(data) != AGGREGATE_SIZE:
            raise RecordError(f"aggregate record must be {AGGREGATE_SIZE} bytes, got {len(data)}")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise RecordError("aggregate checksum mismatch")
        kind, start, dur, scope, sid, lo, hi, count, mean = _AGGREGATE.unpack(body)
        if kind != KIND_AGGREGATE:
            raise RecordError(f"not an aggregate record (kind {kind:#x})")
        if scope == SCOPE_METER:
            sc: Scope = PerMeter(sid)
        elif scope == SCOPE_REGION:
            sc = Regional(sid)
        else:
            raise RecordError(f"unknown scope {scope}")
        try:
            return cls(Window(start, dur), sc, lo | hi << 64, count, mean)
        except ValueError as exc:
            raise RecordError(str(exc)) from None


Record = Union[Measurement, AggregateRecord]


def decode_record(data: bytes) -> Record:
    """Decode any payload record by its kind byte; raises RecordError."""
    if not data:
        raise RecordError("empty record")
    if data[0] == KIND_MEASUREMENT:
        return Measurement.from_bytes(data)
    if data[0] == KIND_AGGREGATE:
        return AggregateRecord.from_bytes(data)
    raise RecordError(f"unknown record kind {data[0]:#x}")


@dataclass
class AggregatorConfig:
    window_ms: int = DEFAULT_WINDOW_MS
    grace_ms: int = DEFAULT_GRACE_MS
    regions: dict[int, int] = field(default_factory=dict)
    default_region: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> AggregatorConfig:
        return cls(
            int(d.get("window_ms", DEFAULT_WINDOW_MS)),
            int(d.get("grace_ms", DEFAULT_GRACE_MS)),
            {int(k): int(v) for k, v in d.get("regions", {}).items()},
            int(d.get("default_region", 0)),
        )


class Aggregator:
    """Single-threaded aggregation state machine.

    The watermark is the end of the most recently closed window; anything
    timestamped before it is late, dropped and counted.
    """

    def __init__(self, cfg: AggregatorConfig | None = None):
        self.cfg = cfg or AggregatorConfig()
        self.watermark_ms = 0
        self.late = 0
        self.ingested = 0
        # window -> meter_id -> [sum, count]
        self._open: dict[Window, dict[int, list[int]]] = {}
        self._closed: set[Window] = set()
        self.audit: list[AggregateRecord] = []

    def region_of(self, meter_id: int) -> int:
        return self.cfg.regions.get(meter_id, self.cfg.default_region)

    def ingest(self, m: Measurement) -> bool:
        w = Window.containing(m.timestamp_ms, self.cfg.window_ms)
        if m.timestamp_ms < self.watermark_ms or w in self._closed:
            self.late += 1
            return False
        acc = self._open.setdefault(w, {}).setdefault(m.meter_id, [0, 0])
        acc[0] += m.value_mw
        acc[1] += 1
        self.ingested += 1
        return True

    def close_window(self, w: Window) -> list[AggregateRecord]:
        if w in self._closed:
            return []
        self._closed.add(w)
        self.watermark_ms = max(self.watermark_ms, w.end_ms)
        meters = self._open.pop(w, {})
        out: list[AggregateRecord] = []
        regions: dict[int, list[int]] = {}
        for meter_id in sorted(meters):
            s, n = meters[meter_id]
            out.append(AggregateRecord(w, PerMeter(meter_id), s, n))
            r = regions.setdefault(self.region_of(meter_id), [0, 0])
            r[0] += s
            r[1] += n
        for region_id in sorted(regions):
            s, n = regions[region_id]
            out.append(AggregateRecord(w, Regional(region_id), s, n))
        self.audit.extend(out)
        return out

    def due(self, now_ms: int) -> list[Window]:
        return sorted(w for w in self._open if now_ms >= w.end_ms + self.cfg.grace_ms)

    def poll(self, now_ms: int | None = None) -> list[AggregateRecord]:
        """Close every open window whose end plus grace has passed."""
        if now_ms is None:
            now_ms = time.time_ns() // 1_000_000
        out = []
        for w in self.due(now_ms):
            out.extend(self.close_window(w))
        return out

    def flush(self) -> list[AggregateRecord]:
        out = []
        for w in sorted(self._open):
            out.extend(self.close_window(w))
        return out

    def write_audit(self, path: str | Path) -> None:
        write_audit(path, self.audit)


AUDIT_COLUMNS = ("window_start_ms", "window_ms", "scope", "scope_id", "sum_mw", "count", "mean_mw")


def write_audit(path: str | Path, records: Iterable[AggregateRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AUDIT_COLUMNS)
        for r in records:
            meter = isinstance(r.scope, PerMeter)
            sid = r.scope.meter_id if meter else r.scope.region_id
            w.writerow(
                (r.window.start_ms, r.window.duration_ms, "meter" if meter else "region", sid, r.sum_mw, r.count, r.mean_mw)
            )


class Republisher:
    """Turns aggregate records into publications under the aggregator's own
    publisher identity."""

    def __init__(self, publisher_id: int, dk: DataKey, topic: str = "aggregate"):
        self.publisher_id = publisher_id
        self.dk = dk
        self.topic = topic
        self.seq = 0

    def republish(self, r: AggregateRecord) -> Publication:
        raw = r.to_bytes()
        if isinstance(r.scope, PerMeter):
            payload = seal_counter_payload(self.dk, self.publisher_id, self.seq, raw)
            self.seq += 1
            return Publication.build(
                self.topic, PrivacyLevel.MODERATE, EncryptionMode.COUNTER, self.publisher_id, payload, self.dk.key_id
            )
        return Publication.build(self.topic, PrivacyLevel.LOW, EncryptionMode.PLAINTEXT, self.publisher_id, raw)
