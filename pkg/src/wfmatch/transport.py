"""Framed message transport: in-memory duplex pairs and TCP.

Wire layout of one frame (big-endian)::

    u32 length | u8 type | u16 sid_len | sid (utf-8) | payload

``length`` covers everything after itself. Frames larger than 64 MiB are
rejected on both the send and receive path.
"""
from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from enum import IntEnum

MAX_FRAME = 64 * 1024 * 1024
_HEADER = struct.Struct(">IBH")


class TransportError(RuntimeError):
    pass


class ProtocolError(RuntimeError):
    """Peer sent something the state machine cannot accept."""


class PeerAbort(ProtocolError):
    pass


class MessageType(IntEnum):
    SETUP_PK = 1
    PAYLOAD_CTS = 2
    EVAL_BATCH = 3
    TAGS_SHUFFLED = 4
    UPDATE_BATCH = 5
    UPDATE_REPLY = 6
    SUM_CT = 7
    SHARE_CTS = 8
    SIZE_CONFIRM = 9
    ABORT = 10


@dataclass(frozen=True)
class Frame:
    type: MessageType
    sid: str
    payload: bytes

    def encode(self) -> bytes:
        sid = self.sid.encode()
        length = 3 + len(sid) + len(self.payload)
        if length > MAX_FRAME:
            raise TransportError(f"frame of {length} bytes exceeds {MAX_FRAME}")
        return _HEADER.pack(length, int(self.type), len(sid)) + sid + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "Frame":
        if len(data) < _HEADER.size:
            raise ProtocolError("truncated frame header")
        length, mtype, sid_len = _HEADER.unpack_from(data)
        if length > MAX_FRAME:
            raise ProtocolError("frame too large")
        if length != len(data) - 4 or sid_len > length - 3:
            raise ProtocolError("frame length mismatch")
        try:
            mtype = MessageType(mtype)
        except ValueError as exc:
            raise ProtocolError(f"unknown message type {mtype}") from exc
        sid_end = _HEADER.size + sid_len
        return cls(mtype, data[_HEADER.size:sid_end].decode(), data[sid_end:])

    @property
    def wire_size(self) -> int:
        return 4 + 3 + len(self.sid.encode()) + len(self.payload)


# -- batch payload helpers -------------------------------------------------

def pack_fixed(items: list[bytes], width: int) -> bytes:
    out = bytearray(struct.pack(">I", len(items)))
    for item in items:
        if len(item) != width:
            raise ValueError("item width mismatch")
        out += item
    return bytes(out)


def unpack_fixed(payload: bytes, width: int) -> list[bytes]:
    if len(payload) < 4:
        raise ProtocolError("batch missing count")
    (count,) = struct.unpack_from(">I", payload)
    if len(payload) != 4 + count * width:
        raise ProtocolError(f"batch count {count} does not match {len(payload) - 4} body bytes")
    return [payload[4 + i * width: 4 + (i + 1) * width] for i in range(count)]


def pack_varlen(items: list[bytes]) -> bytes:
    out = bytearray(struct.pack(">I", len(items)))
    for item in items:
        out += struct.pack(">I", len(item)) + item
    return bytes(out)


def unpack_varlen(payload: bytes) -> list[bytes]:
    if len(payload) < 4:
        raise ProtocolError("batch missing count")
    (count,) = struct.unpack_from(">I", payload)
    items, off = [], 4
    for _ in range(count):
        if off + 4 > len(payload):
            raise ProtocolError("truncated batch")
        (n,) = struct.unpack_from(">I", payload, off)
        off += 4
        if off + n > len(payload):
            raise ProtocolError("truncated batch item")
        items.append(payload[off:off + n])
        off += n
    if off != len(payload):
        raise ProtocolError("trailing bytes in batch")
    return items


# -- channels -------------------------------------------------------------

class Channel:
    """Blocking, FIFO, frame-preserving endpoint with byte accounting.

    ``stage`` labels traffic for the run report; every frame is tallied as its
    full wire size (length prefix included). ``transcript`` optionally keeps
    every frame in both directions for inspection in tests.
    """

    def __init__(self, keep_transcript: bool = False):
        self.stage = "setup"
        self.bytes_sent: dict[str, int] = defaultdict(int)
        self.bytes_received: dict[str, int] = defaultdict(int)
        self.stage_time: dict[str, float] = defaultdict(float)
        self._stage_start = time.perf_counter()
        self.transcript: list[tuple[str, Frame]] | None = [] if keep_transcript else None

    def set_stage(self, stage: str) -> None:
        now = time.perf_counter()
        self.stage_time[self.stage] += now - self._stage_start
        self._stage_start = now
        self.stage = stage

    def finish_timing(self) -> None:
        self.set_stage(self.stage)

    def send(self, mtype: MessageType, sid: str, payload: bytes = b"") -> None:
        frame = Frame(MessageType(mtype), sid, payload)
        data = frame.encode()
        self._send_bytes(data)
        self.bytes_sent[self.stage] += len(data)
        if self.transcript is not None:
            self.transcript.append(("sent", frame))

    def recv(self, expect: MessageType | None = None, sid: str | None = None) -> Frame:
        data = self._recv_bytes()
        frame = Frame.decode(data)
        self.bytes_received[self.stage] += len(data)
        if self.transcript is not None:
            self.transcript.append(("received", frame))
        if frame.type is MessageType.ABORT and expect is not MessageType.ABORT:
            raise PeerAbort(frame.payload.decode(errors="replace"))
        if expect is not None and frame.type is not expect:
            raise ProtocolError(f"expected {expect.name}, got {frame.type.name}")
        if sid is not None and frame.sid != sid:
            raise ProtocolError(f"expected sid {sid!r}, got {frame.sid!r}")
        return frame

    def abort(self, reason: str) -> None:
        try:
            self.send(MessageType.ABORT, "", reason.encode())
        except Exception:
            pass

    def close(self) -> None:
        pass

    def _send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_bytes(self) -> bytes:
        raise NotImplementedError


_CLOSED = object()


class MemoryChannel(Channel):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float | None = None, **kw):
        super().__init__(**kw)
        self._inbox = inbox
        self._outbox = outbox
        self._timeout = timeout
        self._closed = False

    def _send_bytes(self, data: bytes) -> None:
        if self._closed:
            raise TransportError("channel closed")
        self._outbox.put(data)

    def _recv_bytes(self) -> bytes:
        try:
            item = self._inbox.get(timeout=self._timeout)
        except queue.Empty as exc:
            raise TransportError("receive timed out") from exc
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise TransportError("peer closed the channel")
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def channel_pair(timeout: float | None = None, keep_transcript: bool = False) -> tuple[MemoryChannel, MemoryChannel]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return (
        MemoryChannel(b_to_a, a_to_b, timeout, keep_transcript=keep_transcript),
        MemoryChannel(a_to_b, b_to_a, timeout, keep_transcript=keep_transcript),
    )


class TcpChannel(Channel):
    """Frame channel over a connected socket.

    A reader thread drains the socket into a queue so that both parties can
    push large batches at the same time without filling the kernel buffers.
    """

    def __init__(self, sock: socket.socket, **kw):
        super().__init__(**kw)
        self._sock = sock
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._inbox: queue.Queue = queue.Queue()
        self._send_lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self._sock.recv(min(n - len(buf), 1 << 20))
            if not chunk:
                raise TransportError("connection closed by peer")
            buf += chunk
        return bytes(buf)

    def _read_loop(self) -> None:
        try:
            while True:
                head = self._read_exact(4)
                (length,) = struct.unpack(">I", head)
                if length > MAX_FRAME:
                    raise TransportError(f"incoming frame of {length} bytes exceeds limit")
                self._inbox.put(head + self._read_exact(length))
        except (OSError, TransportError) as exc:
            self._inbox.put(exc)

    def _send_bytes(self, data: bytes) -> None:
        with self._send_lock:
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise TransportError(f"send failed: {exc}") from exc

    def _recv_bytes(self) -> bytes:
        item = self._inbox.get()
        if isinstance(item, Exception):
            self._inbox.put(item)
            if isinstance(item, TransportError):
                raise item
            raise TransportError(str(item))
        return item

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def tcp_listen(addr: str, timeout: float | None = None, ready=None, **kw) -> TcpChannel:
    """Accept exactly one session on ``addr``.

    ``ready`` is called with the bound ``(host, port)`` once listening; handy
    when binding port 0.
    """
    host, port = parse_addr(addr)
    with socket.create_server((host, port)) as server:
        server.settimeout(timeout)
        if ready is not None:
            ready(server.getsockname()[:2])
        try:
            conn, _ = server.accept()
        except socket.timeout as exc:
            raise TransportError("no peer connected") from exc
    conn.settimeout(None)
    return TcpChannel(conn, **kw)


def tcp_connect(addr: str, retry_for: float = 10.0, **kw) -> TcpChannel:
    host, port = parse_addr(addr)
    deadline = time.monotonic() + retry_for
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=5)
            sock.settimeout(None)
            return TcpChannel(sock, **kw)
        except OSError as exc:
            if time.monotonic() >= deadline:
                raise TransportError(f"cannot connect to {addr}: {exc}") from exc
            time.sleep(0.05)
