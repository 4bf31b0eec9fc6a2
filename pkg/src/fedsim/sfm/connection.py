"""Message streaming over a driver connection.

Each message travels as its own stream: a HELLO frame carrying the message
headers, then DATA frames with the body split into ``chunk_size`` pieces. The
receiver acknowledges the FINAL frame of each stream. Several streams may be
in flight on one connection; frame writes are serialized so that frames from
different streams interleave but never tear.

Stream ids are odd for streams opened by the connecting side and even for the
accepting side, so ACK and ERROR frames are unambiguous in both directions.
"""

from __future__ import annotations

import itertools
import logging
import os
import queue
import struct
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .drivers import Acceptor, Connection, ConnectionClosed, Driver, get_driver
from .frame import (
    CRC_SIZE,
    DEFAULT_CHUNK_SIZE,
    FIXED_HEADER_SIZE,
    FLAG_FINAL,
    MAX_CHUNK_SIZE,
    BadHeaders,
    CrcMismatch,
    DuplicateFrame,
    Frame,
    FrameError,
    FrameType,
    MissingFinal,
    ProtocolError,
    SeqGap,
    StreamError,
    UnknownStream,
    check_chunk_size,
    crc32,
    decode_headers,
    encode_headers,
    iter_chunks,
    parse_fixed_header,
)

log = logging.getLogger(__name__)

CONTENT_KINDS = ("blob", "file", "object")
RESERVED_HEADERS = ("msg-id", "topic", "content-kind", "total-size")
DEFAULT_WINDOW = 16
_CRC = struct.Struct(">I")


class PeerError(FrameError):
    """The peer answered one of our streams with an ERROR frame."""


class Timeout(FrameError):
    pass


class SizeMismatch(StreamError):
    pass


class StreamAborted(StreamError):
    """An inbound stream failed; carries whatever headers had arrived."""

    def __init__(self, stream_id: int, headers: dict[str, str], cause: Exception):
        super().__init__(f"stream {stream_id} aborted: {cause}")
        self.stream_id = stream_id
        self.headers = headers
        self.cause = cause


class BufferOverflow(RuntimeError):
    pass


class BufferMeter:
    """Counts payload bytes held by the streaming layer and remembers the peak."""

    def __init__(self, limit: int | None = None):
        self.limit = limit
        self.current = 0
        self.peak = 0
        self._lock = threading.Lock()

    def acquire(self, n: int) -> None:
        with self._lock:
            self.current += n
            if self.limit is not None and self.current > self.limit:
                self.current -= n
                raise BufferOverflow(f"stream buffer {self.current + n} exceeds {self.limit}")
            self.peak = max(self.peak, self.current)

    def release(self, n: int) -> None:
        with self._lock:
            self.current -= n


@dataclass
class TransportStats:
    frames_sent: int = 0
    bytes_sent: int = 0
    frames_received: int = 0
    bytes_received: int = 0
    # HELLO and DATA frames of completed or attempted message streams only
    message_bytes_sent: int = 0
    message_bytes_received: int = 0
    messages_sent: int = 0
    messages_received: int = 0

    def snapshot(self) -> dict[str, int]:
        return dict(self.__dict__)


@dataclass
class Message:
    """A logical message. ``body`` may be bytes-like, a file path, a binary
    file object or an iterable of byte pieces (``size`` then required)."""

    topic: str
    body: object = b""
    headers: dict[str, str] = field(default_factory=dict)
    kind: str = "blob"
    msg_id: int = 0
    size: int | None = None
    wire_size: int = 0

    def __post_init__(self):
        if self.kind not in CONTENT_KINDS:
            raise ValueError(f"content-kind must be one of {CONTENT_KINDS}")
        if isinstance(self.body, str) and self.kind == "file":
            self.body = Path(self.body)
        if self.size is None:
            self.size = _body_size(self.body)

    def read_bytes(self) -> bytes:
        if isinstance(self.body, Path):
            return self.body.read_bytes()
        return bytes(self.body)


def _body_size(body) -> int:
    if isinstance(body, (bytes, bytearray, memoryview)):
        return memoryview(body).nbytes
    if isinstance(body, Path):
        return body.stat().st_size
    if hasattr(body, "fileno"):
        return os.fstat(body.fileno()).st_size - body.tell()
    raise ValueError("size must be given for iterable message bodies")


@dataclass
class SendReceipt:
    stream_id: int
    msg_id: int
    frames: int
    payload_bytes: int
    wire_bytes: int
    seconds: float


class _PendingSend:
    def __init__(self, stream_id: int):
        self.stream_id = stream_id
        self.done = threading.Event()
        self.error: Exception | None = None

    def fail(self, exc: Exception) -> None:
        # an ACKed send stays successful even if the connection closes right after
        if self.error is None and not self.done.is_set():
            self.error = exc
        self.done.set()


class _InboundStream:
    def __init__(self, stream_id: int, headers: dict[str, str], spill_dir, wire: int):
        self.stream_id = stream_id
        self.headers = headers
        self.next_seq = 0
        self.received = 0
        self.wire = wire
        self.kind = headers.get("content-kind", "blob")
        if self.kind not in CONTENT_KINDS:
            raise BadHeaders(f"unknown content-kind {self.kind!r}")
        try:
            self.total = int(headers["total-size"])
        except (KeyError, ValueError):
            raise BadHeaders("missing or malformed total-size header") from None
        if self.total < 0:
            raise BadHeaders("negative total-size")
        self.buffer: bytearray | None = None
        self.file = None
        self.path: Path | None = None
        if self.kind == "file":
            fd, name = tempfile.mkstemp(prefix="sfm-", suffix=".part", dir=spill_dir)
            self.file = os.fdopen(fd, "wb")
            self.path = Path(name)
        else:
            self.buffer = bytearray(self.total)

    def discard(self) -> None:
        if self.file is not None:
            self.file.close()
            self.file = None
        if self.path is not None:
            self.path.unlink(missing_ok=True)
        self.buffer = None


_CLOSED = object()


class SfmConnection:
    """Framed message streaming over one driver connection."""

    def __init__(
        self,
        conn: Connection,
        *,
        initiator: bool,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
        window: int = DEFAULT_WINDOW,
        spill_dir: str | os.PathLike | None = None,
        max_message_size: int | None = None,
        name: str = "",
    ):
        self.chunk_size = check_chunk_size(chunk_size)
        self.window = window
        self.spill_dir = spill_dir
        self.max_message_size = max_message_size
        self.name = name
        self.stats = TransportStats()
        bound = window * self.chunk_size
        self.send_meter = BufferMeter(limit=bound)
        self.recv_meter = BufferMeter(limit=bound + MAX_CHUNK_SIZE)
        self.assembly_peak = 0
        self.last_received = time.monotonic()
        self.close_reason: Exception | None = None
        self.reader_crash: BaseException | None = None

        self._conn = conn
        self._stream_ids = itertools.count(1 if initiator else 2, 2)
        self._id_lock = threading.Lock()
        self._write_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self._pending: dict[int, _PendingSend] = {}
        self._streams: dict[int, _InboundStream] = {}
        self._aborted: set[int] = set()
        self._inbound: queue.Queue = queue.Queue()
        self._closed = threading.Event()
        self._heartbeat_stop = threading.Event()
        self._reader = threading.Thread(target=self._read_loop, name=f"sfm-reader-{name}", daemon=True)
        self._reader.start()

    # -- writing -----------------------------------------------------------

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def _write(self, frame: Frame, message: bool = False) -> int:
        n = len(frame.payload)
        self.send_meter.acquire(n)
        try:
            data = frame.encode()
            with self._write_lock:
                if self._closed.is_set():
                    raise ConnectionClosed("connection closed")
                self._conn.sendall(data)
        finally:
            self.send_meter.release(n)
        with self._stats_lock:
            self.stats.frames_sent += 1
            self.stats.bytes_sent += len(data)
            if message:
                self.stats.message_bytes_sent += len(data)
        return len(data)

    def write_frame(self, frame: Frame) -> int:
        """Low-level escape hatch used by tests and tools to inject raw frames."""
        return self._write(frame)

    def _next_stream_id(self) -> int:
        with self._id_lock:
            return next(self._stream_ids)

    def send_message(self, msg: Message, timeout: float | None = None) -> SendReceipt:
        """Stream ``msg`` and block until the peer acknowledges its FINAL frame."""
        start = time.monotonic()
        stream_id = self._next_stream_id()
        msg_id = msg.msg_id or stream_id
        headers = {k: v for k, v in msg.headers.items() if k not in RESERVED_HEADERS}
        headers.update(
            {"msg-id": str(msg_id), "topic": msg.topic, "content-kind": msg.kind, "total-size": str(msg.size)}
        )
        pending = _PendingSend(stream_id)
        self._pending[stream_id] = pending
        held = _HeldChunks(self.send_meter)
        wire = 0
        frames = 0
        sent = 0
        try:
            wire += self._write(Frame(FrameType.HELLO, stream_id, 0, 0, encode_headers(headers)), True)
            with _open_source(msg.body) as source:
                for seq, chunk, final in _lookahead(held.track(source, self.chunk_size)):
                    if pending.error is not None:
                        raise pending.error
                    if sent + len(chunk) > msg.size or (final and sent + len(chunk) != msg.size):
                        raise SizeMismatch(f"body length differs from declared total-size {msg.size}")
                    flags = FLAG_FINAL if final else 0
                    wire += self._write(Frame(FrameType.DATA, stream_id, seq, flags, b"", chunk), True)
                    held.done(chunk)
                    sent += len(chunk)
                    frames += 1
            if not pending.done.wait(timeout):
                raise Timeout(f"no ACK for stream {stream_id} within {timeout}s")
            if pending.error is not None:
                raise pending.error
        except (ConnectionClosed, PeerError):
            raise
        except Exception as exc:
            self._send_error(stream_id, f"sender aborted: {exc}")
            raise
        finally:
            held.release_all()
            self._pending.pop(stream_id, None)
        with self._stats_lock:
            self.stats.messages_sent += 1
        return SendReceipt(stream_id, msg_id, frames, sent, wire, time.monotonic() - start)

    def _send_error(self, stream_id: int, reason: str) -> None:
        try:
            self._write(Frame(FrameType.ERROR, stream_id, 0, 0, encode_headers({"reason": reason[:1000]})))
        except (ConnectionClosed, FrameError):
            pass

    def send_heartbeat(self) -> None:
        self._write(Frame(FrameType.HEARTBEAT))

    def start_heartbeat(self, interval: float) -> threading.Thread:
        def beat():
            while not self._heartbeat_stop.wait(interval):
                try:
                    self.send_heartbeat()
                except (ConnectionClosed, OSError):
                    return

        t = threading.Thread(target=beat, name=f"sfm-heartbeat-{self.name}", daemon=True)
        t.start()
        return t

    # -- reading -----------------------------------------------------------

    def recv_message(self, timeout: float | None = None) -> Message:
        """Next completed inbound message; raises StreamAborted for failed streams."""
        try:
            item = self._inbound.get(timeout=timeout)
        except queue.Empty:
            raise Timeout(f"no message within {timeout}s") from None
        if item is _CLOSED:
            self._inbound.put(_CLOSED)
            raise ConnectionClosed(f"connection closed: {self.close_reason}") from self.close_reason
        if isinstance(item, Exception):
            raise item
        return item

    def _read_exact(self, view: memoryview) -> bool:
        got = 0
        n = len(view)
        while got < n:
            r = self._conn.recv_into(view[got:])
            if r == 0:
                if got:
                    raise ProtocolError(f"connection ended mid-frame ({got}/{n} bytes)")
                return False
            got += r
        return True

    def _read_loop(self) -> None:
        try:
            self._read_frames()
        except ProtocolError as exc:
            log.warning("%s: protocol error, closing: %s", self.name, exc)
            self.close_reason = exc
            self._send_error(0, str(exc))
        except ConnectionClosed as exc:
            self.close_reason = exc
        except Exception as exc:  # pragma: no cover - surfaced via reader_crash
            log.exception("%s: reader crashed", self.name)
            self.reader_crash = exc
            self.close_reason = exc
        finally:
            self._shutdown()

    def _read_frames(self) -> None:
        fixed = bytearray(FIXED_HEADER_SIZE)
        crc_buf = bytearray(CRC_SIZE)
        scratch = bytearray(self.chunk_size)
        max_payload = max(self.chunk_size, MAX_CHUNK_SIZE)
        while True:
            if not self._read_exact(memoryview(fixed)):
                self.close_reason = ConnectionClosed("peer closed the connection")
                return
            head = parse_fixed_header(fixed, max_payload)
            header = bytearray(head.header_len)
            if head.header_len and not self._read_exact(memoryview(header)):
                raise ProtocolError("connection ended mid-frame")
            wire = FIXED_HEADER_SIZE + head.header_len + head.payload_len + CRC_SIZE
            self.last_received = time.monotonic()

            if head.frame_type == FrameType.DATA:
                dest, metered = self._data_destination(head, scratch)
                try:
                    if head.payload_len and not self._read_exact(dest):
                        raise ProtocolError("connection ended mid-frame")
                    if not self._read_exact(memoryview(crc_buf)):
                        raise ProtocolError("connection ended mid-frame")
                    self._count_in(wire)
                    (crc,) = _CRC.unpack(crc_buf)
                    self._on_data(head, dest, crc, wire)
                finally:
                    if metered:
                        self.recv_meter.release(head.payload_len)
                continue

            payload = bytearray(head.payload_len)
            if head.payload_len and not self._read_exact(memoryview(payload)):
                raise ProtocolError("connection ended mid-frame")
            if not self._read_exact(memoryview(crc_buf)):
                raise ProtocolError("connection ended mid-frame")
            self._count_in(wire)
            if head.frame_type == FrameType.HELLO:
                self._on_hello(head.stream_id, bytes(header), wire)
            elif head.frame_type == FrameType.ACK:
                pending = self._pending.get(head.stream_id)
                if pending is not None:
                    pending.done.set()
            elif head.frame_type == FrameType.ERROR:
                self._on_error(head.stream_id, bytes(header))
            elif head.frame_type == FrameType.END:
                self.close_reason = ConnectionClosed("peer ended the connection")
                return
            # HEARTBEAT: liveness already recorded

    def _count_in(self, wire: int) -> None:
        with self._stats_lock:
            self.stats.frames_received += 1
            self.stats.bytes_received += wire

    def _is_own_stream(self, stream_id: int) -> bool:
        return stream_id in self._pending

    def _data_destination(self, head, scratch: bytearray) -> tuple[memoryview, bool]:
        stream = self._streams.get(head.stream_id)
        n = head.payload_len
        if (
            stream is not None
            and stream.buffer is not None
            and head.seq == stream.next_seq
            and stream.received + n <= stream.total
        ):
            return memoryview(stream.buffer)[stream.received : stream.received + n], False
        if len(scratch) < n:
            scratch.extend(bytes(n - len(scratch)))
        self.recv_meter.acquire(n)
        return memoryview(scratch)[:n], True

    def _on_hello(self, stream_id: int, raw_headers: bytes, wire: int) -> None:
        headers: dict[str, str] = {}
        try:
            if stream_id in self._streams or stream_id in self._aborted:
                raise DuplicateFrame(f"second HELLO for stream {stream_id}")
            headers = decode_headers(raw_headers)
            total = int(headers["total-size"]) if headers.get("total-size", "").isdigit() else -1
            if self.max_message_size is not None and total > self.max_message_size:
                raise SizeMismatch(f"message of {total} bytes exceeds receiver limit")
            self._streams[stream_id] = _InboundStream(stream_id, headers, self.spill_dir, wire)
        except StreamError as exc:
            self._abort_inbound(stream_id, exc, headers)

    def _on_data(self, head, payload: memoryview, crc: int, wire: int) -> None:
        sid = head.stream_id
        stream = self._streams.get(sid)
        if stream is None:
            if sid in self._aborted:
                return
            self._abort_inbound(sid, UnknownStream(f"DATA for unknown stream {sid}"), {})
            return
        try:
            if head.seq < stream.next_seq:
                raise DuplicateFrame(f"stream {sid}: seq {head.seq} already received")
            if head.seq > stream.next_seq:
                raise SeqGap(f"stream {sid}: expected seq {stream.next_seq}, got {head.seq}")
            if crc32(payload) != crc:
                raise CrcMismatch(f"stream {sid}: crc mismatch in seq {head.seq}")
            n = len(payload)
            if stream.received + n > stream.total:
                raise SizeMismatch(f"stream {sid}: more bytes than total-size {stream.total}")
            if stream.file is not None:
                stream.file.write(payload)
            stream.received += n
            stream.next_seq += 1
            stream.wire += wire
            if stream.buffer is not None:
                self.assembly_peak = max(self.assembly_peak, stream.received)
            if head.flags & FLAG_FINAL:
                if stream.received != stream.total:
                    raise SizeMismatch(f"stream {sid}: {stream.received} bytes, declared {stream.total}")
                self._complete(stream)
        except StreamError as exc:
            self._abort_inbound(sid, exc, stream.headers)

    def _complete(self, stream: _InboundStream) -> None:
        del self._streams[stream.stream_id]
        if stream.file is not None:
            stream.file.close()
            stream.file = None
            body: object = stream.path
        else:
            body = bytes(stream.buffer) if stream.total < (1 << 20) else stream.buffer
        h = stream.headers
        msg = Message(
            topic=h.get("topic", ""),
            body=body,
            headers=h,
            kind=stream.kind,
            msg_id=int(h["msg-id"]) if h.get("msg-id", "").isdigit() else stream.stream_id,
            size=stream.total,
            wire_size=stream.wire,
        )
        with self._stats_lock:
            self.stats.message_bytes_received += stream.wire
            self.stats.messages_received += 1
        try:
            self._write(Frame(FrameType.ACK, stream.stream_id, stream.next_seq - 1))
        except ConnectionClosed:
            pass
        self._inbound.put(msg)

    def _abort_inbound(self, stream_id: int, exc: Exception, headers: dict[str, str]) -> None:
        stream = self._streams.pop(stream_id, None)
        if stream is not None:
            stream.discard()
        self._aborted.add(stream_id)
        if not isinstance(exc, PeerError):
            self._send_error(stream_id, str(exc))
        self._inbound.put(StreamAborted(stream_id, dict(headers), exc))

    def _on_error(self, stream_id: int, raw: bytes) -> None:
        try:
            reason = decode_headers(raw).get("reason", "")
        except BadHeaders:
            reason = "unreadable reason"
        pending = self._pending.get(stream_id)
        if pending is not None:
            pending.fail(PeerError(f"peer rejected stream {stream_id}: {reason}"))
        elif stream_id in self._streams:
            headers = self._streams[stream_id].headers
            self._abort_inbound(stream_id, PeerError(f"peer aborted stream {stream_id}: {reason}"), headers)
        elif stream_id == 0:
            log.warning("%s: peer reported connection error: %s", self.name, reason)

    # -- lifecycle ---------------------------------------------------------

    def _shutdown(self) -> None:
        self._closed.set()
        self._heartbeat_stop.set()
        try:
            self._conn.close()
        except OSError:
            pass
        reason = self.close_reason or ConnectionClosed("connection closed")
        for pending in list(self._pending.values()):
            pending.fail(ConnectionClosed(f"connection closed before ACK: {reason}"))
        for stream in list(self._streams.values()):
            stream.discard()
            self._inbound.put(StreamAborted(stream.stream_id, stream.headers, MissingFinal(str(reason))))
        self._streams.clear()
        self._inbound.put(_CLOSED)

    def close(self, graceful: bool = True) -> None:
        if graceful and not self._closed.is_set():
            try:
                self._write(Frame(FrameType.END))
            except (ConnectionClosed, OSError):
                pass
        self._heartbeat_stop.set()
        if self.close_reason is None:
            self.close_reason = ConnectionClosed("closed locally")
        self._closed.set()
        try:
            self._conn.close()
        except OSError:
            pass
        self._reader.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _HeldChunks:
    """Meters chunks the sender read from a file or iterable until they are written."""

    def __init__(self, meter: BufferMeter):
        self.meter = meter
        self.held = 0
        self.owned = False

    def track(self, source, chunk_size: int):
        self.owned = not isinstance(source, (bytes, bytearray, memoryview))
        for chunk in iter_chunks(source, chunk_size):
            if self.owned:
                self.meter.acquire(len(chunk))
                self.held += len(chunk)
            yield chunk

    def done(self, chunk) -> None:
        if self.owned:
            self.meter.release(len(chunk))
            self.held -= len(chunk)

    def release_all(self) -> None:
        if self.held:
            self.meter.release(self.held)
            self.held = 0


def _lookahead(chunks):
    it = iter(chunks)
    pending = next(it)
    seq = 0
    for chunk in it:
        yield seq, pending, False
        seq += 1
        pending = chunk
    yield seq, pending, True


class _open_source:
    def __init__(self, body):
        self.body = body
        self._fh = None

    def __enter__(self):
        if isinstance(self.body, Path):
            self._fh = open(self.body, "rb")
            return self._fh
        return self.body

    def __exit__(self, *exc):
        if self._fh is not None:
            self._fh.close()


def open_endpoint(driver: Driver | str, address: str, mode: str) -> Connection | Acceptor:
    """Open a raw driver endpoint: ``mode`` is ``"listen"`` or ``"connect"``."""
    if isinstance(driver, str):
        driver = get_driver(driver)
    if mode == "listen":
        return driver.listen(address)
    if mode == "connect":
        return driver.connect(address)
    raise ValueError(f"mode must be 'listen' or 'connect', got {mode!r}")


def connect(driver: Driver | str, address: str, **options) -> SfmConnection:
    conn = open_endpoint(driver, address, "connect")
    return SfmConnection(conn, initiator=True, **options)


class Listener:
    """Accepts driver connections and wraps each in an :class:`SfmConnection`."""

    def __init__(self, driver: Driver | str, address: str, **options):
        self.acceptor: Acceptor = open_endpoint(driver, address, "listen")
        self.address = self.acceptor.address
        self.options = options

    def accept(self, timeout: float | None = None) -> SfmConnection | None:
        conn = self.acceptor.accept(timeout)
        if conn is None:
            return None
        return SfmConnection(conn, initiator=False, **self.options)

    def close(self) -> None:
        self.acceptor.close()
