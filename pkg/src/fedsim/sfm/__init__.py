"""Streamable framed messages: chunked streaming of large payloads over pluggable drivers."""

from .connection import (
    BufferMeter,
    Listener,
    Message,
    PeerError,
    SendReceipt,
    SfmConnection,
    SizeMismatch,
    StreamAborted,
    Timeout,
    TransportStats,
    connect,
    open_endpoint,
)
from .drivers import (
    AddressInUse,
    ConnectionClosed,
    ConnectionRefused,
    DriverUnavailable,
    InProcDriver,
    TcpDriver,
    available_drivers,
    get_driver,
    register_driver,
)
from .frame import (
    CRC_SIZE,
    DEFAULT_CHUNK_SIZE,
    FIXED_HEADER_SIZE,
    FLAG_COMPRESSED,
    FLAG_FINAL,
    MAX_CHUNK_SIZE,
    MAX_HEADER_LEN,
    MIN_CHUNK_SIZE,
    BadHeaders,
    BadMagic,
    CrcMismatch,
    DuplicateFrame,
    Frame,
    FrameError,
    FrameType,
    MissingFinal,
    ProtocolError,
    SeqGap,
    StreamError,
    TruncatedFrame,
    UnknownFrameType,
    UnknownStream,
    UnsupportedVersion,
    FrameTooLarge,
    StreamAssembler,
    check_chunk_size,
    chunk_payload,
    decode_headers,
    encode_headers,
    decode_frame,
    decode_frames,
    frame_count,
    reassemble,
    stream_wire_size,
)
