"""Length-prefixed JSON frames for the batch sync protocol.

Each frame is a 4-byte big-endian length followed by that many bytes of
UTF-8 JSON (one object, no newline, compact separators, sorted keys). See
docs/wire-protocol.md for the exchange itself.
"""

from __future__ import annotations

import hashlib
import json
import socket
import ssl
import struct

MAX_FRAME_BYTES = 16 * 1024 * 1024

OFFER = "OFFER"
OFFER_ACK = "OFFER_ACK"
ALREADY_COMMITTED = "ALREADY_COMMITTED"
DATA = "DATA"
COMMIT = "COMMIT"
REJECT = "REJECT"
FRAME_TYPES = (OFFER, OFFER_ACK, ALREADY_COMMITTED, DATA, COMMIT, REJECT)
CONTROL_TYPES = (OFFER, OFFER_ACK, ALREADY_COMMITTED, COMMIT, REJECT)


class ProtocolError(Exception):
    """The peer sent something the protocol does not allow."""


class ConnectionClosed(ConnectionError):
    pass


class InsecureTransportError(RuntimeError):
    pass


def checksum(payload: str | bytes) -> str:
    """64-bit BLAKE2b digest of the canonical CSV bytes, as 16 hex chars."""
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    return hashlib.blake2b(payload, digest_size=8).hexdigest()


def batch_id_for(participant_id: str, record_ids) -> str:
    """Content-derived batch id: 128-bit BLAKE2b of the participant and record ids."""
    h = hashlib.blake2b(digest_size=16)
    h.update(participant_id.encode("utf-8"))
    for rid in record_ids:
        h.update(b"\n")
        h.update(rid.encode("utf-8"))
    return h.hexdigest()


def control(kind, batch_id, count=None, digest=None, reason=None) -> dict:
    frame = {"type": kind, "batch_id": batch_id, "count": count, "checksum": digest}
    if reason is not None:
        frame["reason"] = reason
    return frame


def data(payload: str) -> dict:
    return {"type": DATA, "payload": payload}


def encode_frame(obj: dict) -> bytes:
    body = json.dumps(obj, separators=(",", ":"), sort_keys=True, ensure_ascii=False).encode("utf-8")
    if len(body) > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {len(body)} bytes exceeds the {MAX_FRAME_BYTES} limit")
    return struct.pack(">I", len(body)) + body


def decode_body(body: bytes) -> dict:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable frame: {exc}") from None
    if not isinstance(obj, dict) or obj.get("type") not in FRAME_TYPES:
        raise ProtocolError("frame is not an object with a known type")
    if obj["type"] == DATA:
        if set(obj) != {"type", "payload"} or not isinstance(obj["payload"], str):
            raise ProtocolError("DATA frame must carry exactly {type, payload}")
    else:
        if not {"type", "batch_id", "count", "checksum"} <= set(obj) or set(obj) - {
                "type", "batch_id", "count", "checksum", "reason"}:
            raise ProtocolError(f"{obj['type']} frame has the wrong fields")
    return obj


class FrameChannel:
    """Frames over a connected stream socket (plain or TLS)."""

    def __init__(self, sock, secure: bool):
        self.sock = sock
        self.secure = secure
        self._closed = False

    def _read_exact(self, n):
        chunks = []
        while n:
            try:
                chunk = self.sock.recv(min(n, 1 << 20))
            except OSError as exc:  # includes timeouts
                raise ConnectionClosed(str(exc)) from exc
            if not chunk:
                raise ConnectionClosed("peer closed the connection")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def send(self, obj: dict) -> None:
        if self._closed:
            raise ConnectionClosed("channel is closed")
        try:
            self.sock.sendall(encode_frame(obj))
        except OSError as exc:
            raise ConnectionClosed(str(exc)) from exc

    def send_raw(self, raw: bytes) -> None:
        try:
            self.sock.sendall(raw)
        except OSError as exc:
            raise ConnectionClosed(str(exc)) from exc

    def recv(self) -> dict:
        if self._closed:
            raise ConnectionClosed("channel is closed")
        (length,) = struct.unpack(">I", self._read_exact(4))
        if length > MAX_FRAME_BYTES:
            raise ProtocolError(f"declared frame length {length} exceeds the limit")
        return decode_body(self._read_exact(length))

    def shutdown_write(self):
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass

    def close(self):
        if self._closed:
            return
        self._closed = True
        try:
            self.sock.close()
        except OSError:
            pass

    @property
    def closed(self):
        return self._closed


def tcp_connector(host: str, port: int, ssl_context: ssl.SSLContext | None = None,
                  insecure: bool = False, timeout: float = 10.0):
    """Return a zero-argument callable that opens a :class:`FrameChannel`.

    TLS is mandatory unless ``insecure`` is set, which exists for loopback
    tests only.
    """
    if ssl_context is None and not insecure:
        raise InsecureTransportError("refusing a plaintext sync channel without insecure test mode")

    def connect() -> FrameChannel:
        sock = socket.create_connection((host, port), timeout=timeout)
        if ssl_context is not None:
            sock = ssl_context.wrap_socket(sock, server_hostname=host)
            return FrameChannel(sock, secure=True)
        return FrameChannel(sock, secure=False)

    return connect


def client_tls_context(cafile: str | None = None) -> ssl.SSLContext:
    ctx = ssl.create_default_context(ssl.Purpose.SERVER_AUTH, cafile=cafile)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    return ctx


def server_tls_context(certfile: str, keyfile: str) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    ctx.load_cert_chain(certfile, keyfile)
    return ctx
