from __future__ import annotations

import contextlib
import time

import pytest

from privbus.attestation import Platform
from privbus.attestor import Attestor, AttestorServer
from privbus.broker import BrokerConfig, BrokerThread
from privbus.crypto import new_signing_key
from privbus.identity import default_policy


def wait_until(pred, timeout: float = 10.0, step: float = 0.01) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(step)
    return pred()


@pytest.fixture
def platform_key():
    return new_signing_key()


@pytest.fixture
def platform(platform_key):
    return Platform(platform_key, 1)


@pytest.fixture
def attestor(platform_key):
    server = AttestorServer(Attestor(default_policy(), [platform_key.public_key()], new_signing_key())).start()
    yield server
    server.stop()


@pytest.fixture
def broker():
    b = BrokerThread(BrokerConfig(port=0)).start()
    yield b
    b.stop()


@pytest.fixture
def make_broker():
    started = []

    def make(**kw):
        b = BrokerThread(BrokerConfig(port=0, **kw)).start()
        started.append(b)
        return b

    yield make
    for b in started:
        b.stop()


# -- acceptance reporting --------------------------------------------------

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as note:`` records one PASS/FAIL line;
    ``note`` collects the measured values shown next to it."""
    results = request.config.stash.setdefault(_RESULTS, {})

    @contextlib.contextmanager
    def run(number: int, title: str):
        note: dict = {}
        t0 = time.monotonic()
        try:
            yield note
        except BaseException as exc:
            note.setdefault("error", str(exc).splitlines()[0][:160] if str(exc) else type(exc).__name__)
            results[number] = ("FAIL", title, note, time.monotonic() - t0)
            raise
        results[number] = ("PASS", title, note, time.monotonic() - t0)

    return run


def _fmt(v) -> str:
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, None)
    if not results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, 11):
        if n not in results:
            tr.write_line(f"criterion {n:>2}: NOT RUN")
            continue
        verdict, title, note, wall = results[n]
        detail = ", ".join(f"{k}={_fmt(v)}" for k, v in note.items())
        tr.write_line(f"criterion {n:>2}: {verdict}  {title} ({detail}; {wall:.1f}s)")
