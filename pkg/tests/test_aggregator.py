from __future__ import annotations

import csv
import random

import pytest

from privbus.aggregator import (
    AggregateRecord,
    Aggregator,
    AggregatorConfig,
    PerMeter,
    Regional,
    Republisher,
    Window,
    decode_record,
)
from privbus.crypto import DataKey, open_counter_payload
from privbus.envelope import EncryptionMode, Measurement, PrivacyLevel, decode_publication, encode_publication

W = 1000


def m(meter: int, ts: int, value: int, seq: int = 0) -> Measurement:
    return Measurement(meter, ts, value, seq)


def by_scope(records):
    return {r.scope: r for r in records}


def test_window_alignment():
    assert Window.containing(12_345, W) == Window(12_000, W)
    with pytest.raises(ValueError):
        Window(1, W)


def test_single_measurement():
    a = Aggregator(AggregatorConfig(window_ms=W))
    a.ingest(m(1, 500, 777))
    [meter, region] = a.close_window(Window(0, W))
    assert meter.scope == PerMeter(1) and meter.count == 1 and meter.mean_mw == 777
    assert region.scope == Regional(0)


def test_three_values_mean():
    a = Aggregator(AggregatorConfig(window_ms=W))
    for v in (1000, 2000, 3000):
        a.ingest(m(1, 10, v))
    assert a.close_window(Window(0, W))[0].mean_mw == 2000


def test_two_meters_one_region():
    a = Aggregator(AggregatorConfig(window_ms=W))
    for meter, v in (("A", 1000), ("A", 3000), ("B", 2000)):
        a.ingest(m(1 if meter == "A" else 2, 100, v))
    recs = by_scope(a.close_window(Window(0, W)))
    assert recs[PerMeter(1)].mean_mw == recs[PerMeter(2)].mean_mw == 2000
    r = recs[Regional(0)]
    assert (r.sum_mw, r.count, r.mean_mw) == (6000, 3, 2000)


def test_regional_is_not_mean_of_means():
    a = Aggregator(AggregatorConfig(window_ms=W))
    for v in (0, 0, 0, 4000):
        a.ingest(m(1, 0, v))
    a.ingest(m(2, 0, 4000))
    r = by_scope(a.close_window(Window(0, W)))[Regional(0)]
    assert r.mean_mw == 8000 // 5  # mean of means would give 2500


def test_empty_window_emits_nothing():
    assert Aggregator(AggregatorConfig(window_ms=W)).close_window(Window(0, W)) == []


def test_late_data_dropped_and_counted():
    a = Aggregator(AggregatorConfig(window_ms=W))
    a.ingest(m(1, 100, 5))
    before = a.close_window(Window(0, W))
    assert not a.ingest(m(1, 999, 9))
    assert a.late == 1
    assert a.close_window(Window(0, W)) == []
    assert a.audit == before


def test_close_is_idempotent():
    a = Aggregator(AggregatorConfig(window_ms=W))
    a.ingest(m(1, 100, 5))
    assert len(a.close_window(Window(0, W))) == 2
    assert a.close_window(Window(0, W)) == []


def test_poll_respects_grace():
    a = Aggregator(AggregatorConfig(window_ms=W, grace_ms=200))
    a.ingest(m(1, 100, 5))
    assert a.poll(1199) == []
    assert len(a.poll(1200)) == 2


def test_mean_invariant_enforced():
    with pytest.raises(ValueError):
        AggregateRecord(Window(0, W), PerMeter(1), 10, 3, 4)
    with pytest.raises(ValueError):
        AggregateRecord(Window(0, W), PerMeter(1), 10, 0)


def test_record_round_trip_wide_sum():
    r = AggregateRecord(Window(3_600_000, 3_600_000), Regional(7), 2**100 + 5, 2**40)
    assert decode_record(r.to_bytes()) == r


def test_oracle_ten_thousand(tmp_path):
    rng = random.Random(7)
    regions = {mid: mid % 3 for mid in range(50)}
    a = Aggregator(AggregatorConfig(window_ms=W, grace_ms=0, regions=regions))
    log = []
    ts = 0
    for seq in range(10_000):
        ts += rng.randrange(0, 3)
        x = m(rng.randrange(50), ts, rng.randrange(0, 1 << 24), seq)
        log.append(x)
        a.ingest(x)
    emitted = a.flush()
    assert a.late == 0

    sums: dict = {}
    for x in log:
        w = x.timestamp_ms // W * W
        for scope in (PerMeter(x.meter_id), Regional(regions[x.meter_id])):
            s = sums.setdefault((w, scope), [0, 0])
            s[0] += x.value_mw
            s[1] += 1
    expected = {k: (s, n, s // n) for k, (s, n) in sums.items()}
    got = {(r.window.start_ms, r.scope): (r.sum_mw, r.count, r.mean_mw) for r in emitted}
    assert got == expected

    for w in {r.window for r in emitted}:
        meters = [r for r in emitted if r.window == w and isinstance(r.scope, PerMeter)]
        regional = [r for r in emitted if r.window == w and isinstance(r.scope, Regional)]
        assert sum(r.sum_mw for r in meters) == sum(r.sum_mw for r in regional)
        assert sum(r.count for r in meters) == sum(r.count for r in regional)

    path = tmp_path / "audit.csv"
    a.write_audit(path)
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == len(emitted)
    assert sum(int(r["sum_mw"]) for r in rows if r["scope"] == "region") == sum(x.value_mw for x in log)


def test_republish_headers_and_round_trip():
    dk = DataKey.generate(3)
    rp = Republisher(900, dk)
    per = AggregateRecord(Window(0, W), PerMeter(1), 6000, 3)
    reg = AggregateRecord(Window(0, W), Regional(0), 6000, 3)

    p = decode_publication(encode_publication(rp.republish(per)))
    assert (p.header.privacy, p.header.enc, p.header.key_epoch) == (PrivacyLevel.MODERATE, EncryptionMode.COUNTER, 3)
    assert decode_record(open_counter_payload(dk, 900, p.payload)) == per
    assert per.to_bytes() not in p.payload

    q = decode_publication(encode_publication(rp.republish(reg)))
    assert (q.header.privacy, q.header.enc) == (PrivacyLevel.LOW, EncryptionMode.PLAINTEXT)
    assert decode_record(q.payload) == reg


def test_config_from_dict():
    cfg = AggregatorConfig.from_dict({"window_ms": 1000, "grace_ms": 5, "regions": {"4": 2}})
    assert cfg.window_ms == 1000 and cfg.regions == {4: 2}
    assert Aggregator(cfg).region_of(4) == 2 and Aggregator(cfg).region_of(5) == 0
