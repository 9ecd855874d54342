"""Message model and the fixed-layout binary frame shared by every process.

Frame layout (little-endian)::

    magic "SB" | version u8 | topic_len u8 | topic | privacy u8 | enc u8
    | publisher_id u64 | key_epoch u32 | payload_len u32 | payload
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Iterator

MAGIC = b"SB"
VERSION = 1
MAX_TOPIC = 64
U32_MAX = 0xFFFFFFFF
U64_MAX = 0xFFFFFFFFFFFFFFFF

_PREFIX = struct.Struct("<2sBB")  # magic, version, topic_len
_FIXED = struct.Struct("<BBQII")  # privacy, enc, publisher_id, key_epoch, payload_len
HEADER_OVERHEAD = _PREFIX.size + _FIXED.size

# Payload records carry a kind byte and a CRC so a wrong key or a flipped
# ciphertext bit surfaces as a decode failure.
KIND_MEASUREMENT = 0x4D
KIND_AGGREGATE = 0x41
_MEASUREMENT = struct.Struct("<BQQQQ")


class FrameError(ValueError):
    """Malformed, truncated or inconsistent frame."""


class TruncatedFrame(FrameError):
    pass


class UnknownDiscriminant(FrameError):
    pass


class RecordError(ValueError):
    """Payload bytes do not decode to a valid record."""


class PrivacyLevel(IntEnum):
    """Sensitivity tier. Wire values are 0=High, 1=Moderate, 2=Low.

    Comparisons follow sensitivity, so ``HIGH > MODERATE > LOW``.
    """

    HIGH = 0
    MODERATE = 1
    LOW = 2

    @property
    def rank(self) -> int:
        return 2 - int(self)

    def __lt__(self, other):
        if not isinstance(other, PrivacyLevel):
            return NotImplemented
        return self.rank < other.rank

    def __le__(self, other):
        if not isinstance(other, PrivacyLevel):
            return NotImplemented
        return self.rank <= other.rank

    def __gt__(self, other):
        if not isinstance(other, PrivacyLevel):
            return NotImplemented
        return self.rank > other.rank

    def __ge__(self, other):
        if not isinstance(other, PrivacyLevel):
            return NotImplemented
        return self.rank >= other.rank

    @classmethod
    def parse(cls, name: str) -> PrivacyLevel:
        return cls[name.strip().upper()]


class EncryptionMode(IntEnum):
    COUNTER = 0
    PLAINTEXT = 1


def levels_mask(levels: Iterable[PrivacyLevel]) -> int:
    mask = 0
    for lvl in levels:
        mask |= 1 << int(lvl)
    return mask


def levels_from_mask(mask: int) -> frozenset[PrivacyLevel]:
    if mask & ~0b111:
        raise UnknownDiscriminant(f"bad level mask {mask:#x}")
    return frozenset(lvl for lvl in PrivacyLevel if mask & (1 << int(lvl)))


def _check_u(value: int, bits: int, name: str) -> None:
    if not isinstance(value, int) or value < 0 or value >> bits:
        raise ValueError(f"{name} must be an unsigned {bits}-bit integer, got {value!r}")


@dataclass(frozen=True)
class Measurement:
    meter_id: int
    timestamp_ms: int
    value_mw: int
    seq: int

    def __post_init__(self) -> None:
        for name in ("meter_id", "timestamp_ms", "value_mw", "seq"):
            _check_u(getattr(self, name), 64, name)

    def to_bytes(self) -> bytes:
        body = _MEASUREMENT.pack(KIND_MEASUREMENT, self.meter_id, self.timestamp_ms, self.value_mw, self.seq)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> Measurement:
        if len(data) != _MEASUREMENT.size + 4:
            raise RecordError(f"measurement record must be {_MEASUREMENT.size + 4} bytes, got {len(data)}")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise RecordError("measurement checksum mismatch")
        kind, meter_id, ts, value, seq = _MEASUREMENT.unpack(body)
        if kind != KIND_MEASUREMENT:
            raise RecordError(f"not a measurement record (kind {kind:#x})")
        return cls(meter_id, ts, value, seq)


MEASUREMENT_SIZE = _MEASUREMENT.size + 4


@dataclass(frozen=True)
class MessageHeader:
    topic: str
    privacy: PrivacyLevel
    enc: EncryptionMode
    publisher_id: int
    key_epoch: int = 0
    payload_len: int = 0

    def __post_init__(self) -> None:
        if len(self.topic.encode("utf-8")) > MAX_TOPIC:
            raise ValueError(f"topic longer than {MAX_TOPIC} bytes")
        object.__setattr__(self, "privacy", PrivacyLevel(self.privacy))
        object.__setattr__(self, "enc", EncryptionMode(self.enc))
        _check_u(self.publisher_id, 64, "publisher_id")
        _check_u(self.key_epoch, 32, "key_epoch")
        _check_u(self.payload_len, 32, "payload_len")
        if self.enc is EncryptionMode.PLAINTEXT and self.privacy is not PrivacyLevel.LOW:
            raise ValueError(f"plaintext publications must be Low, not {self.privacy.name}")


@dataclass(frozen=True)
class Publication:
    header: MessageHeader
    payload: bytes = b""

    def __post_init__(self) -> None:
        if self.header.payload_len != len(self.payload):
            raise ValueError(
                f"payload_len {self.header.payload_len} does not match payload of {len(self.payload)} bytes"
            )

    @classmethod
    def build(
        cls,
        topic: str,
        privacy: PrivacyLevel,
        enc: EncryptionMode,
        publisher_id: int,
        payload: bytes,
        key_epoch: int = 0,
    ) -> Publication:
        return cls(MessageHeader(topic, privacy, enc, publisher_id, key_epoch, len(payload)), bytes(payload))


@dataclass(frozen=True)
class Subscription:
    """A publisher-authorized interest in one publisher's stream."""

    subscriber_id: int
    publisher_id: int
    topic_filter: str
    levels: frozenset[PrivacyLevel]
    authorization: bytes = field(default=b"", compare=False)

    def __post_init__(self) -> None:
        _check_u(self.subscriber_id, 64, "subscriber_id")
        _check_u(self.publisher_id, 64, "publisher_id")
        if len(self.topic_filter.encode("utf-8")) > MAX_TOPIC:
            raise ValueError(f"topic filter longer than {MAX_TOPIC} bytes")
        object.__setattr__(self, "levels", frozenset(PrivacyLevel(x) for x in self.levels))

    def signing_bytes(self) -> bytes:
        topic = self.topic_filter.encode("utf-8")
        return (
            b"privbus-sub\x01"
            + struct.pack("<QQB", self.subscriber_id, self.publisher_id, len(topic))
            + topic
            + bytes([levels_mask(self.levels)])
        )

    @property
    def key(self) -> tuple[int, int, str, frozenset[PrivacyLevel]]:
        return (self.subscriber_id, self.publisher_id, self.topic_filter, self.levels)

    def authorize(self, signing_key) -> Subscription:
        """Return a copy signed by the publisher's Ed25519 key."""
        return Subscription(
            self.subscriber_id, self.publisher_id, self.topic_filter, self.levels, signing_key.sign(self.signing_bytes())
        )

    def verify(self, verification_key) -> bool:
        from cryptography.exceptions import InvalidSignature

        try:
            verification_key.verify(self.authorization, self.signing_bytes())
        except (InvalidSignature, ValueError):
            return False
        return True

    def to_dict(self) -> dict:
        return {
            "subscriber_id": self.subscriber_id,
            "publisher_id": self.publisher_id,
            "topic_filter": self.topic_filter,
            "levels": sorted(lvl.name.lower() for lvl in self.levels),
            "authorization": self.authorization.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Subscription:
        return cls(
            int(d["subscriber_id"]),
            int(d["publisher_id"]),
            str(d["topic_filter"]),
            frozenset(PrivacyLevel.parse(x) for x in d["levels"]),
            bytes.fromhex(d.get("authorization", "")),
        )


def encode_publication(p: Publication) -> bytes:
    h = p.header
    topic = h.topic.encode("utf-8")
    if len(topic) > MAX_TOPIC:
        raise FrameError("topic too long")
    if h.payload_len != len(p.payload):
        raise FrameError("payload_len mismatch")
    return (
        _PREFIX.pack(MAGIC, VERSION, len(topic))
        + topic
        + _FIXED.pack(h.privacy, h.enc, h.publisher_id, h.key_epoch, h.payload_len)
        + p.payload
    )


def parse_header(buf, offset: int = 0) -> tuple[MessageHeader, int, int]:
    """Parse the header starting at ``offset``.

    Returns ``(header, payload_start, frame_end)``. Raises
    :class:`TruncatedFrame` when ``buf`` does not yet hold the whole frame.
    """
    avail = len(buf) - offset
    if avail < _PREFIX.size:
        raise TruncatedFrame("frame shorter than prefix")
    magic, version, topic_len = _PREFIX.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FrameError(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    if topic_len > MAX_TOPIC:
        raise FrameError(f"topic length {topic_len} exceeds {MAX_TOPIC}")
    fixed_at = offset + _PREFIX.size + topic_len
    if len(buf) < fixed_at + _FIXED.size:
        raise TruncatedFrame("frame shorter than header")
    privacy, enc, publisher_id, key_epoch, payload_len = _FIXED.unpack_from(buf, fixed_at)
    try:
        privacy = PrivacyLevel(privacy)
    except ValueError:
        raise UnknownDiscriminant(f"unknown privacy discriminant {privacy}") from None
    try:
        enc = EncryptionMode(enc)
    except ValueError:
        raise UnknownDiscriminant(f"unknown encryption discriminant {enc}") from None
    try:
        topic = bytes(buf[offset + _PREFIX.size : fixed_at]).decode("utf-8")
    except UnicodeDecodeError:
        raise FrameError("topic is not valid UTF-8") from None
    start = fixed_at + _FIXED.size
    end = start + payload_len
    if end > len(buf):
        raise TruncatedFrame(f"payload needs {payload_len} bytes, {len(buf) - start} present")
    try:
        header = MessageHeader(topic, privacy, enc, publisher_id, key_epoch, payload_len)
    except ValueError as exc:
        raise FrameError(str(exc)) from None
    return header, start, end


def decode_publication(data: bytes) -> Publication:
    header, start, end = parse_header(data)
    if end != len(data):
        raise FrameError(f"{len(data) - end} trailing bytes after frame")
    return Publication(header, bytes(data[start:end]))


def frame_length(buf, offset: int = 0) -> int | None:
    """Total length of the frame at ``offset`` or None if not yet knowable."""
    if len(buf) - offset < _PREFIX.size:
        return None
    magic, version, topic_len = _PREFIX.unpack_from(buf, offset)
    if magic != MAGIC or version != VERSION or topic_len > MAX_TOPIC:
        raise FrameError("bad frame prefix")
    fixed_at = offset + _PREFIX.size + topic_len
    if len(buf) < fixed_at + _FIXED.size:
        return None
    payload_len = struct.unpack_from("<I", buf, fixed_at + _FIXED.size - 4)[0]
    return _PREFIX.size + topic_len + _FIXED.size + payload_len


class FrameBuffer:
    """Incremental splitter for a byte stream of concatenated frames."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf += data

    def __len__(self) -> int:
        return len(self._buf)

    def take(self) -> bytes:
        """Remove and return the unparsed remainder."""
        data = bytes(self._buf)
        self._buf.clear()
        return data

    def frames(self) -> Iterator[tuple[MessageHeader, bytes, bytes]]:
        """Yield ``(header, frame_bytes, payload)`` for each complete frame."""
        buf = self._buf
        pos = 0
        try:
            while True:
                try:
                    header, start, end = parse_header(buf, pos)
                except TruncatedFrame:
                    break
                frame = bytes(buf[pos:end])
                payload_at = start - pos
                # Advance before yielding so an abandoned iteration never
                # hands out the same frame twice.
                pos = end
                yield header, frame, frame[payload_at:]
        finally:
            del buf[:pos]


def match_header(h: MessageHeader, s: Subscription) -> bool:
    return (
        h.publisher_id == s.publisher_id
        and (s.topic_filter == "*" or s.topic_filter == h.topic)
        and h.privacy in s.levels
    )
