"""The fixed publication set behind ``data/golden_frames.hex``.

Regenerate with ``python tests/golden.py`` only when the wire format is
meant to change.
"""
from __future__ import annotations

from pathlib import Path

from privbus.aggregator import AggregateRecord, PerMeter, Regional, Window
from privbus.crypto import DataKey, seal_counter_payload
from privbus.envelope import EncryptionMode, Measurement, PrivacyLevel, Publication, encode_publication

GOLDEN_PATH = Path(__file__).parent / "data" / "golden_frames.hex"

_KEY = DataKey(3, bytes(range(32)))


def golden_publications() -> list[Publication]:
    pubs = []
    for i in range(8):
        m = Measurement(1000 + i, 1_700_000_000_000 + 1000 * i, 250_000 + 17 * i, i)
        payload = seal_counter_payload(_KEY, m.meter_id, m.seq, m.to_bytes())
        pubs.append(Publication.build("meter", PrivacyLevel.HIGH, EncryptionMode.COUNTER, m.meter_id, payload, _KEY.key_id))
    for i in range(4):
        m = Measurement(7, 1_700_000_000_000 + i, i * 1_000_003, 2**40 + i)
        pubs.append(Publication.build("meter/plain", PrivacyLevel.LOW, EncryptionMode.PLAINTEXT, 7, m.to_bytes()))
    w = Window(1_699_999_200_000, 3_600_000)
    for i in range(4):
        r = AggregateRecord(w, PerMeter(1000 + i), 10_000_000 + i, 3600)
        payload = seal_counter_payload(_KEY, 900, i, r.to_bytes())
        pubs.append(Publication.build("aggregate", PrivacyLevel.MODERATE, EncryptionMode.COUNTER, 900, payload, _KEY.key_id))
    for i in range(2):
        r = AggregateRecord(w, Regional(i), 2**70 + i, 2**33)
        pubs.append(Publication.build("aggregate", PrivacyLevel.LOW, EncryptionMode.PLAINTEXT, 900, r.to_bytes()))
    pubs.append(Publication.build("", PrivacyLevel.LOW, EncryptionMode.PLAINTEXT, 0, b""))
    pubs.append(Publication.build("t" * 64, PrivacyLevel.HIGH, EncryptionMode.COUNTER, 2**64 - 1, b"\x00\xff" * 5, 2**32 - 1))
    return pubs


def golden_frames() -> list[bytes]:
    return [encode_publication(p) for p in golden_publications()]


if __name__ == "__main__":
    GOLDEN_PATH.write_text("".join(f.hex() + "\n" for f in golden_frames()))
    print(f"wrote {GOLDEN_PATH}")
