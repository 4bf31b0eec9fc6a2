from __future__ import annotations

import threading
import uuid

from conftest import read_hex_fixture
from fedsim.sfm import FLAG_FINAL, Frame, FrameType, Message, SfmConnection, decode_frames, encode_headers
from fedsim.sfm.connection import open_endpoint

HELLO_HEADERS = {"msg-id": "1", "topic": "demo", "content-kind": "blob", "total-size": "10"}


def test_fixture_decodes_to_hello_and_final_data():
    golden = read_hex_fixture("sfm_two_frames.hex")
    assert len(golden) == 126
    hello, data = decode_frames(golden)
    assert (hello.frame_type, hello.stream_id, hello.seq, hello.payload) == (FrameType.HELLO, 1, 0, b"")
    assert hello.header == encode_headers(HELLO_HEADERS)
    assert (data.frame_type, data.stream_id, data.seq, data.flags) == (FrameType.DATA, 1, 0, FLAG_FINAL)
    assert data.payload == b"hello, sfm"
    assert data.payload_crc32 == 0xF7AEAC05


def test_frames_encode_to_fixture():
    frames = [
        Frame(FrameType.HELLO, 1, 0, 0, encode_headers(HELLO_HEADERS)),
        Frame(FrameType.DATA, 1, 0, FLAG_FINAL, b"", b"hello, sfm"),
    ]
    assert b"".join(f.encode() for f in frames) == read_hex_fixture("sfm_two_frames.hex")


def _raw_pair():
    acceptor = open_endpoint("inproc", f"golden-{uuid.uuid4().hex[:8]}", "listen")
    client = SfmConnection(open_endpoint("inproc", acceptor.address, "connect"), initiator=True)
    raw = acceptor.accept(timeout=5)
    return acceptor, client, raw


def _read(raw, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        got += raw.recv_into(view[got:])
    return bytes(buf)


def test_send_message_emits_fixture_bytes():
    golden = read_hex_fixture("sfm_two_frames.hex")
    acceptor, conn, raw = _raw_pair()
    receipts = []
    t = threading.Thread(target=lambda: receipts.append(conn.send_message(Message("demo", b"hello, sfm"))))
    t.start()
    assert _read(raw, len(golden)) == golden
    raw.sendall(Frame(FrameType.ACK, 1, 0).encode())
    t.join(5)
    assert receipts[0].frames == 1 and receipts[0].wire_bytes == len(golden)
    conn.close()
    acceptor.close()


def test_receiving_fixture_yields_message_and_ack():
    golden = read_hex_fixture("sfm_two_frames.hex")
    acceptor, conn, raw = _raw_pair()
    raw.sendall(golden)
    msg = conn.recv_message(timeout=5)
    assert (msg.topic, bytes(msg.body), msg.kind, msg.msg_id) == ("demo", b"hello, sfm", "blob", 1)
    ack = decode_frames(_read(raw, 32))[0]
    assert (ack.frame_type, ack.stream_id, ack.seq) == (FrameType.ACK, 1, 0)
    conn.close()
    acceptor.close()
