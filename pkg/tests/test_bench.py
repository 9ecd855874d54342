from __future__ import annotations

import csv
import os
import time

import numpy as np
import pytest

from privbus.bench import (
    Burst,
    CpuSampler,
    PeriodicBurst,
    Pipeline,
    PipelineConfig,
    RateSweep,
    Scenario,
    SingleMessage,
    ladder,
    run_burst,
    run_periodic,
    run_scenario,
    run_single,
    sample_cpu,
)
from privbus.bench import stats as st
from privbus.bench.cpu import ProcessGone
from privbus.bench.procs import offsets_ns, send_schedule


# -- schedules -------------------------------------------------------------


def test_offsets_shapes():
    assert offsets_ns({"kind": "burst", "total": 5}).tolist() == [0] * 5
    r = offsets_ns({"kind": "rate", "rate": 1000, "duration_s": 2})
    assert len(r) == 2000 and np.all(np.diff(r) == 1_000_000)
    s = offsets_ns({"kind": "single", "count": 60, "interval_s": 1.0})
    assert s[-1] == 59_000_000_000
    p = offsets_ns({"kind": "periodic", "rate": 100, "period_s": 1.0, "duty": 0.5, "cycles": 2})
    assert len(p) == 100 and p[49] < 500_000_000 <= 1_000_000_000 == p[50]
    with pytest.raises(ValueError):
        offsets_ns({"kind": "bogus"})


class Recorder:
    def __init__(self):
        self.chunks = []

    def sendall(self, data):
        self.chunks.append((time.time_ns(), data))


def test_send_schedule_keeps_order_and_never_sends_early():
    frames = [i.to_bytes(4, "little") for i in range(500)]
    offsets = offsets_ns({"kind": "rate", "rate": 2000, "duration_s": 0.25})
    sock = Recorder()
    t0, actual = send_schedule(sock, frames, offsets)
    assert b"".join(c for _, c in sock.chunks) == b"".join(frames)
    assert np.all(actual >= t0 + offsets)
    assert np.all(np.diff(actual) >= 0)
    # the sender stays on schedule at a rate this low
    assert (actual - (t0 + offsets)).max() < 50_000_000


def test_ladder():
    rates = ladder(10_000)
    assert len(rates) == 7 and rates[0] == 1000 and rates[-1] == 20_000
    assert all(a < b for a, b in zip(rates, rates[1:]))


def test_scenario_validation():
    with pytest.raises(ValueError):
        RateSweep(())
    with pytest.raises(ValueError):
        Scenario(Burst(), repeats=0)


# -- statistics against closed-form inputs ---------------------------------


def test_latency_slope_recovers_linear_growth():
    send = np.arange(0, 5_000_000_000, 1_000_000)
    lat = 1000 + 0.5 * (send / 1000)  # +0.5 s of delay per second sent
    assert st.latency_slope(send, lat) == pytest.approx(0.5)
    assert st.latency_slope(send, np.full(len(send), 700)) == pytest.approx(0.0, abs=1e-12)
    assert st.latency_slope([1, 2], [3, 4]) == 0.0


def test_monotone_classification():
    assert st.is_monotone_classification([3, 1, 2], [False, True, True])
    assert not st.is_monotone_classification([1, 2, 3], [True, False, True])
    assert st.is_monotone_classification([1, 2], [False, False])


def test_spearman_rank_only():
    assert st.spearman([1, 2, 3, 4], [10, 20, 25, 1000]) == pytest.approx(1.0)
    assert st.spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_plateau_detection():
    send = np.arange(1000) * 1000
    lat = np.where(send < 300_000, send // 10, 900 + (np.arange(1000) % 100))
    p = st.detect_plateau(send, lat, 300_000)
    assert p.count == 700 and 900 <= p.p10_us < p.p90_us <= 999
    assert p.bounded()
    assert st.detect_plateau(send, lat, None) is None


def test_saturation_and_service_rate():
    ts = np.arange(100) * 10_000  # 100 Hz samples in us
    depth = np.where(np.arange(100) >= 40, 100, 0)
    delivered = np.arange(100) * 500  # 500 per 10 ms -> 50k/s
    assert st.saturation_start(ts, depth, 100) == 400_000 * 1000
    assert st.service_rate(ts, delivered, depth, 100) == pytest.approx(50_000)
    assert st.service_rate(ts, delivered, np.zeros(100), 100) is None


def test_curve_deviation_is_mean_delay():
    sched = np.arange(0, 1_000_000_000, 1_000_000)
    recv = sched + 20_000_000  # every message 20 ms late
    grid, ideal, actual = st.cumulative_curves(sched, recv, 0, 2_000_000_000, 1_000_000)
    assert st.curve_deviation_ms(grid, ideal, actual) == pytest.approx(20.0, rel=0.01)


# -- CPU accounting --------------------------------------------------------


def test_sample_cpu_monotone_and_gone():
    sampler = CpuSampler({"me": os.getpid()}, hz=50).start()
    end = time.monotonic() + 0.3
    while time.monotonic() < end:
        sum(range(1000))
    sampler.stop()
    series = [r[3] for r in sampler.rows]
    assert len(series) >= 5 and series == sorted(series)
    with pytest.raises(ProcessGone):
        sample_cpu(2**22 + 12345)


# -- live pipeline ---------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    with Pipeline(PipelineConfig(mode="secure", workdir=str(tmp_path_factory.mktemp("bench")))) as p:
        yield p


def test_idle_broker_accrues_little_cpu(pipeline):
    before = pipeline.broker_cpu_ms()
    time.sleep(3.0)
    used = pipeline.broker_cpu_ms() - before
    assert used < 0.05 * 3000  # under 5% of a core while idle


def test_burst_conservation_small(pipeline):
    rep = run_burst(pipeline, 5000)
    assert rep.sent == rep.received == 5000
    assert rep.lost == 0 and rep.duplicates == 0 and rep.out_of_order == 0
    assert np.array_equal(rep.seq - rep.seq[0], np.arange(5000))
    assert (rep.latency_us >= 0).all()


def test_periodic_curves_cover_two_cycles(pipeline):
    low = run_periodic(pipeline, 500)
    cycles = {row[2] for row in low.curves}
    assert cycles == {0, 1}
    assert low.curves[-1][3] == 2000.0
    assert low.curves[-1][4] == low.sent == 500
    high = run_periodic(pipeline, 100_000)
    assert high.deviation_ms > low.deviation_ms
    assert low.deviation_ms < 50


def test_regular_and_secure_deliver_same_set(tmp_path):
    seqs = {}
    for mode in ("regular", "secure"):
        with Pipeline(PipelineConfig(mode=mode, workdir=str(tmp_path / mode))) as p:
            rep = run_burst(p, 2000)
            seqs[mode] = (rep.seq - rep.raw.first_seq).tolist()
    assert seqs["regular"] == seqs["secure"] == list(range(2000))


def test_report_reproducible_from_samples_csv(tmp_path):
    reps = run_scenario(Scenario(PeriodicBurst(2000), mode="regular"), tmp_path)
    rows = list(csv.DictReader((tmp_path / "samples.csv").open()))
    lat = np.array([int(r["latency_us"]) for r in rows])
    assert (lat >= 0).all()
    assert np.array_equal(lat, np.array([int(r["recv_us"]) - int(r["send_us"]) for r in rows]))
    recomputed = st.latency_stats(lat)
    [summary] = list(csv.DictReader((tmp_path / "summary.csv").open()))
    for key in ("mean_us", "p50_us", "p90_us", "p99_us", "max_us"):
        assert float(summary[key]) == round(getattr(recomputed, key), 3)
    assert recomputed == reps[0].stats
    ideal = list(csv.DictReader((tmp_path / "ideal_vs_actual.csv").open()))
    assert {r["cycle"] for r in ideal} == {"0", "1"}
    cpu = list(csv.DictReader((tmp_path / "cpu.csv").open()))
    for role in {r["role"] for r in cpu}:
        series = [float(r["cpu_ms"]) for r in cpu if r["role"] == role]
        assert series == sorted(series)


@pytest.mark.slow
def test_single_message_per_second(pipeline):
    rep = run_single(pipeline, 60, 1.0)
    assert rep.received == 60 and rep.lost == 0
    span = (rep.send_ns.max() - rep.send_ns.min()) / 1e9
    assert 58.5 <= span <= 59.5
    assert rep.stats.max_us >= rep.stats.p99_us > 0
