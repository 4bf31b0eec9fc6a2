"""Frame codec for the streamable framed message layer.

Wire layout of one frame (integers big-endian)::

    magic "SFM1" | version u8 | frame_type u8 | flags u16 | stream_id u64
    | seq u32 | header_len u32 | payload_len u32      (28 bytes)
    | header bytes | payload bytes | payload crc32 u32
"""

from __future__ import annotations

import enum
import io
import struct
import zlib
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Mapping

MAGIC = b"SFM1"
VERSION = 1

FLAG_FINAL = 0x0001
FLAG_COMPRESSED = 0x0002  # reserved, never set

DEFAULT_CHUNK_SIZE = 1 << 20
MIN_CHUNK_SIZE = 4 << 10
MAX_CHUNK_SIZE = 16 << 20
MAX_HEADER_LEN = 64 << 10

_FIXED = struct.Struct(">4sBBHQIII")
FIXED_HEADER_SIZE = _FIXED.size  # 28
_CRC = struct.Struct(">I")
CRC_SIZE = _CRC.size


class FrameType(enum.IntEnum):
    HELLO = 0
    DATA = 1
    END = 2
    ACK = 3
    ERROR = 4
    HEARTBEAT = 5


class FrameError(Exception):
    """Base class for all framing and stream-assembly errors."""


class ProtocolError(FrameError):
    """The byte stream can no longer be parsed; the connection is unusable."""


class BadMagic(ProtocolError):
    pass


class UnsupportedVersion(ProtocolError):
    pass


class UnknownFrameType(ProtocolError):
    pass


class FrameTooLarge(ProtocolError):
    pass


class TruncatedFrame(ProtocolError):
    pass


class StreamError(FrameError):
    """A single stream is broken; other streams on the connection are unaffected."""


class SeqGap(StreamError):
    pass


class DuplicateFrame(StreamError):
    pass


class CrcMismatch(StreamError):
    pass


class MissingFinal(StreamError):
    pass


class UnknownStream(StreamError):
    pass


class BadHeaders(StreamError):
    pass


def crc32(data) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True)
class Frame:
    frame_type: FrameType
    stream_id: int = 0
    seq: int = 0
    flags: int = 0
    header: bytes = b""
    payload: bytes | memoryview = b""
    payload_crc32: int | None = None

    def __post_init__(self):
        if self.payload_crc32 is None:
            object.__setattr__(self, "payload_crc32", crc32(self.payload))

    @property
    def final(self) -> bool:
        return bool(self.flags & FLAG_FINAL)

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    @property
    def wire_size(self) -> int:
        return FIXED_HEADER_SIZE + len(self.header) + len(self.payload) + CRC_SIZE

    def prefix(self) -> bytes:
        """Fixed header plus header bytes, i.e. everything before the payload."""
        return (
            _FIXED.pack(
                MAGIC,
                VERSION,
                self.frame_type,
                self.flags,
                self.stream_id,
                self.seq,
                len(self.header),
                len(self.payload),
            )
            + self.header
        )

    def encode(self) -> bytes:
        return b"".join((self.prefix(), self.payload, _CRC.pack(self.payload_crc32)))


@dataclass(frozen=True)
class FrameHead:
    frame_type: FrameType
    flags: int
    stream_id: int
    seq: int
    header_len: int
    payload_len: int


def parse_fixed_header(raw, max_payload: int = MAX_CHUNK_SIZE) -> FrameHead:
    magic, version, ftype, flags, stream_id, seq, header_len, payload_len = _FIXED.unpack(raw)
    if magic != MAGIC:
        raise BadMagic(f"bad frame magic {bytes(magic)!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"frame version {version}")
    try:
        ftype = FrameType(ftype)
    except ValueError:
        raise UnknownFrameType(f"frame type {ftype}") from None
    if header_len > MAX_HEADER_LEN:
        raise FrameTooLarge(f"header_len {header_len} > {MAX_HEADER_LEN}")
    if payload_len > max_payload:
        raise FrameTooLarge(f"payload_len {payload_len} > {max_payload}")
    return FrameHead(ftype, flags, stream_id, seq, header_len, payload_len)


def decode_frame(data, max_payload: int = MAX_CHUNK_SIZE) -> tuple[Frame, int]:
    """Decode one frame from the front of ``data``; returns the frame and bytes consumed.

    The CRC is carried on the frame, not checked here; :func:`reassemble` and the
    connection reader verify it.
    """
    view = memoryview(data).cast("B")
    if len(view) < FIXED_HEADER_SIZE:
        raise TruncatedFrame(f"{len(view)} bytes < fixed header")
    head = parse_fixed_header(view[:FIXED_HEADER_SIZE], max_payload)
    end = FIXED_HEADER_SIZE + head.header_len + head.payload_len + CRC_SIZE
    if len(view) < end:
        raise TruncatedFrame(f"frame needs {end} bytes, have {len(view)}")
    pos = FIXED_HEADER_SIZE
    header = bytes(view[pos : pos + head.header_len])
    pos += head.header_len
    payload = bytes(view[pos : pos + head.payload_len])
    pos += head.payload_len
    (crc,) = _CRC.unpack(view[pos : pos + CRC_SIZE])
    frame = Frame(head.frame_type, head.stream_id, head.seq, head.flags, header, payload, crc)
    return frame, end


def decode_frames(data, max_payload: int = MAX_CHUNK_SIZE) -> list[Frame]:
    view = memoryview(data).cast("B")
    frames = []
    pos = 0
    while pos < len(view):
        frame, used = decode_frame(view[pos:], max_payload)
        frames.append(frame)
        pos += used
    return frames


def check_chunk_size(chunk_size: int) -> int:
    if not MIN_CHUNK_SIZE <= chunk_size <= MAX_CHUNK_SIZE:
        raise ValueError(f"chunk_size {chunk_size} outside [{MIN_CHUNK_SIZE}, {MAX_CHUNK_SIZE}]")
    return chunk_size


def frame_count(size: int, chunk_size: int = DEFAULT_CHUNK_SIZE) -> int:
    """Number of DATA frames a payload of ``size`` bytes is split into (at least 1)."""
    return max(1, -(-size // chunk_size))


def stream_wire_size(size: int, chunk_size: int = DEFAULT_CHUNK_SIZE, header_len: int = 0) -> int:
    """Bytes on the wire for a HELLO frame with ``header_len`` header bytes plus DATA frames."""
    per_frame = FIXED_HEADER_SIZE + CRC_SIZE
    return per_frame + header_len + frame_count(size, chunk_size) * per_frame + size


def iter_chunks(source, chunk_size: int) -> Iterator[bytes | memoryview]:
    """Slice a byte source into chunks of exactly ``chunk_size`` (last may be short).

    ``source`` may be bytes-like, a binary file object, or an iterable of
    bytes-like pieces. Always yields at least one (possibly empty) chunk.
    """
    if isinstance(source, (bytes, bytearray, memoryview)):
        view = memoryview(source).cast("B")
        if len(view) == 0:
            yield view
            return
        for off in range(0, len(view), chunk_size):
            yield view[off : off + chunk_size]
        return
    if hasattr(source, "readinto") or hasattr(source, "read"):
        yield from _iter_file_chunks(source, chunk_size)
        return
    yield from _rechunk(source, chunk_size)


def _iter_file_chunks(fh: BinaryIO, chunk_size: int) -> Iterator[bytes]:
    emitted = False
    while True:
        block = fh.read(chunk_size)
        while block and len(block) < chunk_size:
            more = fh.read(chunk_size - len(block))
            if not more:
                break
            block += more
        if not block:
            break
        emitted = True
        yield block
        if len(block) < chunk_size:
            break
    if not emitted:
        yield b""


def _rechunk(pieces: Iterable, chunk_size: int) -> Iterator[bytes | memoryview]:
    # pieces that span whole chunks are sliced without copying
    buf = bytearray()
    emitted = False
    for piece in pieces:
        view = memoryview(piece).cast("B")
        if buf:
            take = min(chunk_size - len(buf), len(view))
            buf += view[:take]
            view = view[take:]
            if len(buf) == chunk_size:
                emitted = True
                yield bytes(buf)
                buf = bytearray()
        while len(view) >= chunk_size:
            emitted = True
            yield view[:chunk_size]
            view = view[chunk_size:]
        if len(view):
            buf += view
    if buf or not emitted:
        yield bytes(buf)


def chunk_payload(payload, chunk_size: int = DEFAULT_CHUNK_SIZE, stream_id: int = 0) -> Iterator[Frame]:
    """Split ``payload`` into DATA frames with consecutive seq and FINAL on the last."""
    check_chunk_size(chunk_size)
    chunks = iter_chunks(payload, chunk_size)
    seq = 0
    pending = next(chunks)
    for chunk in chunks:
        yield Frame(FrameType.DATA, stream_id, seq, 0, b"", pending)
        seq += 1
        pending = chunk
    yield Frame(FrameType.DATA, stream_id, seq, FLAG_FINAL, b"", pending)


class StreamAssembler:
    """Incremental, order-checking reassembly of one stream's DATA frames."""

    def __init__(self, stream_id: int, sink=None):
        self.stream_id = stream_id
        self.next_seq = 0
        self.done = False
        self.size = 0
        self.sink = sink if sink is not None else io.BytesIO()

    def check(self, frame_type: FrameType, stream_id: int, seq: int, flags: int) -> None:
        if frame_type != FrameType.DATA:
            raise StreamError(f"unexpected {frame_type.name} frame in stream {stream_id}")
        if stream_id != self.stream_id:
            raise UnknownStream(f"frame for stream {stream_id} in assembler for {self.stream_id}")
        if self.done or seq < self.next_seq:
            raise DuplicateFrame(f"stream {stream_id}: seq {seq} already received")
        if seq > self.next_seq:
            raise SeqGap(f"stream {stream_id}: expected seq {self.next_seq}, got {seq}")

    def add(self, frame: Frame) -> bool:
        """Append a frame; returns True once the FINAL frame has been accepted."""
        self.check(frame.frame_type, frame.stream_id, frame.seq, frame.flags)
        if crc32(frame.payload) != frame.payload_crc32:
            raise CrcMismatch(f"stream {frame.stream_id}: crc mismatch in seq {frame.seq}")
        self.sink.write(frame.payload)
        self.size += len(frame.payload)
        self.next_seq += 1
        self.done = frame.final
        return self.done


def reassemble(frames: Iterable[Frame]) -> bytes:
    """Inverse of :func:`chunk_payload`: validate order and CRCs, concatenate payloads."""
    assembler = None
    for frame in frames:
        if assembler is None:
            assembler = StreamAssembler(frame.stream_id)
        assembler.add(frame)
    if assembler is None or not assembler.done:
        raise MissingFinal("stream ended before its FINAL frame")
    return assembler.sink.getvalue()


def encode_headers(headers: Mapping[str, str]) -> bytes:
    lines = []
    for key, value in headers.items():
        key, value = str(key), str(value)
        if not key or "=" in key or "\n" in key or "\n" in value:
            raise BadHeaders(f"header {key!r} cannot be encoded as a key=value line")
        lines.append(f"{key}={value}\n")
    raw = "".join(lines).encode("utf-8")
    if len(raw) > MAX_HEADER_LEN:
        raise BadHeaders("headers exceed 64 KiB")
    return raw


def decode_headers(raw: bytes) -> dict[str, str]:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise BadHeaders("headers are not UTF-8") from exc
    headers = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise BadHeaders(f"malformed header line {line!r}")
        headers[key] = value
    return headers
