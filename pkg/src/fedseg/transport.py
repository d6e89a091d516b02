"""Wire format and sessions for server <-> client traffic.

Frame layout (all integers little-endian)::

    magic "FSSL" (4) | version (1) | kind (1) | payload length (8) | payload

A non-empty payload is::

    round u32 | client id (u16 length + UTF-8) | meta (u32 length + JSON)
    | has_params u8 | [block count u32 | tensor records ...]

and a tensor record is::

    name (u16 length + UTF-8) | dtype u8 | rank u8 | dims u32 * rank | raw data

The empty payload stands for round 0, no client id, no meta, no tensors.
Checkpoint files are BroadcastModel frames.
"""
from __future__ import annotations

import enum
import json
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FSSL"
VERSION = 1
HEADER = struct.Struct("<4sBBQ")
HEADER_SIZE = HEADER.size  # 14
MAX_PAYLOAD = 2 ** 32
MAX_RANK = 8

DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


class Kind(enum.IntEnum):
    JOIN = 1
    JOIN_ACK = 2
    BROADCAST_MODEL = 3
    DELTA_SUBMISSION = 4
    ROUND_DONE = 5
    ABORT = 6


class FrameError(ValueError):
    """Malformed bytes; ``offset`` is where decoding gave up."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagic(FrameError):
    pass


class BadVersion(FrameError):
    pass


class BadKind(FrameError):
    pass


class Truncated(FrameError):
    pass


class LengthMismatch(FrameError):
    pass


class SessionClosed(ConnectionError):
    """Peer went away or the session was closed locally."""


# -- tensor codec ---------------------------------------------------------------

def encode_tensor(name: str, array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = DTYPE_CODES.get(np.dtype(dt).newbyteorder("<") if dt.kind == "f" else np.dtype(dt))
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype} for block {name!r}")
    if arr.ndim > MAX_RANK:
        raise ValueError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode_tensor(buf, offset: int = 0, end: int | None = None) -> tuple[str, np.ndarray, int]:
    """Parse one record at ``offset``; returns ``(name, array, next offset)``."""
    end = len(buf) if end is None else end

    def need(n, at):
        if at + n > end:
            raise Truncated(f"tensor record needs {n} bytes, {end - at} left", at)

    need(2, offset)
    (nlen,) = struct.unpack_from("<H", buf, offset)
    pos = offset + 2
    need(nlen + 2, pos)
    try:
        name = bytes(buf[pos:pos + nlen]).decode("utf-8")
    except UnicodeDecodeError:
        raise FrameError("tensor name is not UTF-8", pos) from None
    pos += nlen
    code, rank = struct.unpack_from("<BB", buf, pos)
    if code not in DTYPES:
        raise FrameError(f"unknown dtype code {code}", pos)
    if rank > MAX_RANK:
        raise FrameError(f"rank {rank} exceeds {MAX_RANK}", pos + 1)
    pos += 2
    need(4 * rank, pos)
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = DTYPES[code].itemsize
    for d in dims:
        nbytes *= d
    need(nbytes, pos)
    try:
        arr = np.frombuffer(bytes(buf[pos:pos + nbytes]), dtype=DTYPES[code]).reshape(dims)
    except ValueError:  # e.g. a zero dim next to dims whose product overflows
        raise FrameError(f"unrepresentable shape {dims}", pos - 4 * rank) from None
    return name, arr.astype(DTYPES[code].newbyteorder("="), copy=False), pos + nbytes


# -- messages -------------------------------------------------------------------

@dataclass
class Message:
    kind: Kind
    round: int = 0
    client_id: str = ""
    meta: dict = field(default_factory=dict)
    params: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        self.kind = Kind(self.kind)

    def same_as(self, other: "Message") -> bool:
        if (self.kind, self.round, self.client_id, self.meta) != (
                other.kind, other.round, other.client_id, other.meta):
            return False
        if (self.params is None) != (other.params is None):
            return False
        if self.params is None:
            return True
        return list(self.params) == list(other.params) and all(
            self.params[n].dtype == other.params[n].dtype
            and self.params[n].shape == other.params[n].shape
            and self.params[n].tobytes() == other.params[n].tobytes() for n in self.params)


def _payload(msg: Message) -> bytes:
    if msg.round == 0 and not msg.client_id and not msg.meta and msg.params is None:
        return b""
    cid = msg.client_id.encode("utf-8")
    meta = json.dumps(msg.meta, sort_keys=True, separators=(",", ":")).encode("utf-8") if msg.meta else b""
    parts = [struct.pack("<IH", msg.round, len(cid)), cid, struct.pack("<I", len(meta)), meta]
    if msg.params is None:
        parts.append(b"\x00")
    else:
        parts.append(struct.pack("<BI", 1, len(msg.params)))
        parts.extend(encode_tensor(n, a) for n, a in msg.params.items())
    return b"".join(parts)


def encode(msg: Message) -> bytes:
    payload = _payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(payload)} bytes exceeds 2^32")
    return HEADER.pack(MAGIC, VERSION, int(msg.kind), len(payload)) + payload


def decode_header(buf) -> tuple[Kind, int]:
    if len(buf) < 4 or bytes(buf[:4]) != MAGIC[:len(buf[:4])]:
        raise BadMagic("bad magic", 0)
    if len(buf) < HEADER_SIZE:
        raise Truncated(f"frame header needs {HEADER_SIZE} bytes, got {len(buf)}", len(buf))
    magic, version, kind, length = HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}", 4)
    try:
        kind = Kind(kind)
    except ValueError:
        raise BadKind(f"unknown message kind {kind}", 5) from None
    if length > MAX_PAYLOAD:
        raise FrameError(f"declared payload length {length} exceeds 2^32", 6)
    return kind, length


def decode_payload(kind: Kind, buf, base: int = HEADER_SIZE) -> Message:
    """Parse a payload; offsets in errors are reported relative to the frame."""
    end = len(buf)
    if end == 0:
        return Message(kind)

    def need(n, at):
        if at + n > end:
            raise Truncated(f"payload field needs {n} bytes, {end - at} left", base + at)

    need(6, 0)
    rnd, clen = struct.unpack_from("<IH", buf, 0)
    pos = 6
    need(clen + 4, pos)
    try:
        cid = bytes(buf[pos:pos + clen]).decode("utf-8")
    except UnicodeDecodeError:
        raise FrameError("client id is not UTF-8", base + pos) from None
    pos += clen
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    need(mlen + 1, pos)
    meta = {}
    if mlen:
        try:
            meta = json.loads(bytes(buf[pos:pos + mlen]).decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            raise FrameError("meta is not valid JSON", base + pos) from None
        if not isinstance(meta, dict):
            raise FrameError("meta must be a JSON object", base + pos)
    pos += mlen
    has = buf[pos]
    pos += 1
    params = None
    if has not in (0, 1):
        raise FrameError(f"bad has_params flag {has}", base + pos - 1)
    if has:
        need(4, pos)
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params = {}
        for _ in range(count):
            try:
                name, arr, pos = decode_tensor(buf, pos, end)
            except FrameError as e:
                raise type(e)(str(e).rsplit(" (byte offset", 1)[0], base + e.offset) from None
            if name in params:
                raise FrameError(f"duplicate block {name!r}", base + pos)
            params[name] = arr
    if pos != end:
        raise LengthMismatch(f"{end - pos} unread payload bytes", base + pos)
    return Message(kind, rnd, cid, meta, params)


def decode(buf) -> Message:
    """Parse one complete frame, raising a :class:`FrameError` on bad input."""
    buf = memoryview(bytes(buf)) if not isinstance(buf, (bytes, bytearray, memoryview)) else memoryview(buf)
    kind, length = decode_header(buf)
    if HEADER_SIZE + length > len(buf):
        raise Truncated(f"declared {length} payload bytes, {len(buf) - HEADER_SIZE} available",
                        len(buf))
    if HEADER_SIZE + length < len(buf):
        raise LengthMismatch(f"{len(buf) - HEADER_SIZE - length} bytes after frame end",
                             HEADER_SIZE + length)
    return decode_payload(kind, buf[HEADER_SIZE:])


def save_checkpoint(path, params, round_index: int = 0, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    if hasattr(params, "stages"):
        meta.setdefault("stages", params.stages)
    msg = Message(Kind.BROADCAST_MODEL, round_index, "checkpoint", meta, dict(params.items()))
    with open(path, "wb") as f:
        f.write(encode(msg))


def load_checkpoint(path):
    """Returns ``(ParamSet, message)``."""
    from .params import ParamSet

    with open(path, "rb") as f:
        msg = decode(f.read())
    if msg.kind != Kind.BROADCAST_MODEL or msg.params is None:
        raise FrameError("not a model checkpoint", 5)
    stages = msg.meta.get("stages") or {n: "final" for n in msg.params}
    return ParamSet(msg.params, stages), msg


# -- sessions -------------------------------------------------------------------

class LoopbackSession:
    """In-process session; frames still go through encode/decode."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, name: str = ""):
        self._inbox, self._outbox = inbox, outbox
        self._closed = False
        self.name = name

    def send(self, msg: Message) -> None:
        if self._closed:
            raise SessionClosed("session closed")
        self._outbox.put(encode(msg))

    def recv(self, timeout: float | None = None) -> Message:
        if self._closed:
            raise SessionClosed("session closed")
        try:
            frame = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no message within timeout") from None
        if frame is None:
            self._closed = True
            raise SessionClosed("peer closed the session")
        return decode(frame)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(None)


class LoopbackHub:
    """Listener for loopback sessions: ``connect()`` on the client side,
    ``accept()`` on the server side."""

    def __init__(self):
        self._pending: queue.Queue = queue.Queue()
        self.address = "loopback"

    def connect(self, name: str = "") -> LoopbackSession:
        a, b = queue.Queue(), queue.Queue()
        self._pending.put(LoopbackSession(b, a, name))
        return LoopbackSession(a, b, name)

    def accept(self, timeout: float | None = None) -> LoopbackSession:
        try:
            return self._pending.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no client connected") from None

    def close(self) -> None:
        pass


class SocketSession:
    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._lock = threading.Lock()
        self._closed = False

    def _read_exact(self, n: int) -> bytes:
        chunks, got = [], 0
        while got < n:
            try:
                chunk = self._sock.recv(min(n - got, 1 << 20))
            except socket.timeout:
                raise TimeoutError("socket receive timed out") from None
            except OSError as e:
                raise SessionClosed(f"connection error: {e}") from None
            if not chunk:
                raise SessionClosed("peer closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def send(self, msg: Message) -> None:
        frame = encode(msg)
        with self._lock:
            try:
                self._sock.sendall(frame)
            except OSError as e:
                raise SessionClosed(f"connection error: {e}") from None

    def recv(self, timeout: float | None = None) -> Message:
        if self._closed:
            raise SessionClosed("session closed")
        self._sock.settimeout(timeout)
        head = self._read_exact(HEADER_SIZE)
        kind, length = decode_header(head)
        self._sock.settimeout(None)
        payload = self._read_exact(length) if length else b""
        return decode_payload(kind, memoryview(payload))

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def parse_address(address) -> tuple[str, int]:
    if isinstance(address, tuple):
        return address[0], int(address[1])
    host, _, port = str(address).rpartition(":")
    return host or "127.0.0.1", int(port)


class SocketListener:
    def __init__(self, address="127.0.0.1:0"):
        host, port = parse_address(address)
        self._sock = socket.create_server((host, port))
        self.address = "%s:%d" % self._sock.getsockname()[:2]

    def accept(self, timeout: float | None = None) -> SocketSession:
        self._sock.settimeout(timeout)
        try:
            conn, _ = self._sock.accept()
        except socket.timeout:
            raise TimeoutError("no client connected") from None
        conn.settimeout(None)
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return SocketSession(conn)

    def close(self) -> None:
        self._sock.close()


def connect(address, timeout: float = 30.0) -> SocketSession:
    """Connect to a listening server, retrying until ``timeout`` seconds."""
    import time

    host, port = parse_address(address)
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=5.0)
            break
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketSession(sock)


def serve(address, handler, max_sessions: int | None = None) -> tuple[SocketListener, threading.Thread]:
    """Accept connections in a background thread, running ``handler(session)``
    in its own thread for each one."""
    listener = SocketListener(address)

    def loop():
        n = 0
        while max_sessions is None or n < max_sessions:
            try:
                session = listener.accept()
            except OSError:
                return
            threading.Thread(target=handler, args=(session,), daemon=True).start()
            n += 1

    t = threading.Thread(target=loop, daemon=True)
    t.start()
    return listener, t
