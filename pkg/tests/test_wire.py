import socket
import struct

import pytest

from prosokit.wire import (
    MAX_FRAME_BYTES,
    OFFER,
    REJECT,
    ConnectionClosed,
    FrameChannel,
    ProtocolError,
    batch_id_for,
    checksum,
    control,
    data,
    decode_body,
    encode_frame,
)


def test_example_bytes():
    bid = batch_id_for("P0001", ["P0001-s000-pos"])
    frame = encode_frame(control(OFFER, bid, 1, checksum("x")))
    assert frame[:4] == bytes.fromhex("00000066")
    assert frame[4:] == (b'{"batch_id":"' + bid.encode()
                         + b'","checksum":"4adf4367f96e584f","count":1,"type":"OFFER"}')
    assert encode_frame(data("a,b\n1,2\n")) == b"\x00\x00\x00\x26" + b'{"payload":"a,b\\n1,2\\n","type":"DATA"}'
    assert encode_frame(control(REJECT, bid, reason="checksum mismatch"))[4:].startswith(b'{"batch_id"')


def test_documented_batch_id():
    assert batch_id_for("P0001", ["P0001-s000-pos"]) == "2a8c022ccb95dc5f3381fa2685f211c9"


def test_digests():
    import hashlib

    assert checksum("a,b\n") == hashlib.blake2b(b"a,b\n", digest_size=8).hexdigest()
    assert checksum(b"x") == checksum("x") and len(checksum("")) == 16
    assert batch_id_for("P", ["a", "b"]) == hashlib.blake2b(b"P\na\nb", digest_size=16).hexdigest()
    assert batch_id_for("P", ["a", "b"]) != batch_id_for("P", ["b", "a"])


@pytest.mark.parametrize("body", [
    b"not json", b"[1]", b'{"type":"HELLO"}', b'{"type":"DATA"}', b'{"type":"DATA","payload":3}',
    b'{"type":"DATA","payload":"","x":1}', b'{"type":"OFFER","batch_id":"a"}',
    b'{"type":"OFFER","batch_id":"a","count":1,"checksum":"c","extra":1}', b"\xff\xfe",
])
def test_decode_rejects(body):
    with pytest.raises(ProtocolError):
        decode_body(body)


def test_channel_round_trip_and_limits():
    a, b = socket.socketpair()
    ca, cb = FrameChannel(a, False), FrameChannel(b, False)
    ca.send(data("héllo\n"))
    assert cb.recv() == {"type": "DATA", "payload": "héllo\n"}
    ca.send_raw(struct.pack(">I", MAX_FRAME_BYTES + 1))
    with pytest.raises(ProtocolError):
        cb.recv()
    ca.close()
    with pytest.raises(ConnectionClosed):
        cb.recv()
    cb.close()


def test_oversized_frame_refused():
    with pytest.raises(ProtocolError):
        encode_frame(data("x" * (MAX_FRAME_BYTES + 1)))
