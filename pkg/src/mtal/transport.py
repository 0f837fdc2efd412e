"""Message bus carrying shards between domains.

Two backends share one wire format so they are interchangeable bit for bit:

* an in-process bus (queues of encoded envelopes), and
* a loopback TCP hub with one long-lived connection per ordered domain pair;
  frames are a 4-byte big-endian length prefix followed by one envelope.

Envelope layout (little-endian):
    version u16 | kind u8 | round u32 | sender u32 | receiver u32
    | shard count u32 | { payload length u64, shard payload } * count
    | reason length u32 | reason bytes              (abort envelopes only)

Shard payload layout (little-endian, CRC32 of all preceding bytes in footer):
    magic 'MTALMSG1' | version u16 | kind u8 | pad u8
    | round u32 | sender u32 | receiver u32
    | cell count u64 | rows u32[] | cols u32[] | values f32[]
    | rect rows u64 | rect cols u64 | row ids u32[] | col ids u32[]
    | block f32[rows*cols] | crc32 u32

Values are rounded to f32 at this trust boundary in both backends, so a
computation driven through either bus sees identical numbers.
"""
from __future__ import annotations

import queue
import socket
import struct
import threading
import zlib
from dataclasses import dataclass, field

import numpy as np

WIRE_VERSION = 1
SHARD_MAGIC = b"MTALMSG1"

KIND_RESIDUAL = 1
KIND_PREDICTION = 2
KIND_BARRIER = 3
KIND_ABORT = 4

KIND_NAMES = {KIND_RESIDUAL: "residual_shard", KIND_PREDICTION: "prediction_shard",
              KIND_BARRIER: "round_barrier", KIND_ABORT: "abort"}

DEFAULT_TCP_PORT = 7164


class ProtocolError(RuntimeError):
    pass


class ProtocolTimeout(ProtocolError):
    pass


class ProtocolAbort(ProtocolError):
    pass


_EMPTY_I = np.empty(0, dtype=np.int64)
_EMPTY_F = np.empty(0, dtype=np.float64)
_EMPTY_BLOCK = np.empty((0, 0), dtype=np.float64)


@dataclass
class Shard:
    """Values a domain sends to one peer: sparse cells and/or a dense block.

    Rows are global aligned-entity ids; columns are global column indices.
    A rect block is a compact encoding of the (row, col, value) list over the
    full rows x cols rectangle.
    """

    kind: int
    sender: int
    receiver: int
    round_t: int
    cell_rows: np.ndarray = field(default_factory=lambda: _EMPTY_I)
    cell_cols: np.ndarray = field(default_factory=lambda: _EMPTY_I)
    cell_vals: np.ndarray = field(default_factory=lambda: _EMPTY_F)
    rect_rows: np.ndarray = field(default_factory=lambda: _EMPTY_I)
    rect_cols: np.ndarray = field(default_factory=lambda: _EMPTY_I)
    rect_vals: np.ndarray = field(default_factory=lambda: _EMPTY_BLOCK)

    @property
    def n_cells(self):
        return len(self.cell_vals)

    def entity_ids(self):
        """All aligned-entity ids this shard mentions."""
        return np.union1d(self.cell_rows, self.rect_rows)


@dataclass
class Envelope:
    kind: int
    round_t: int
    sender: int
    receiver: int
    shards: list
    version: int = WIRE_VERSION
    reason: str = ""


def encode_shard(shard: Shard) -> bytes:
    """Serialize one shard; cells are sorted by (row, column) on the wire."""
    order = np.lexsort((shard.cell_cols, shard.cell_rows))
    rows = np.asarray(shard.cell_rows, dtype="<u4")[order]
    cols = np.asarray(shard.cell_cols, dtype="<u4")[order]
    vals = np.asarray(shard.cell_vals, dtype="<f4")[order]
    if not np.isfinite(vals).all() or not np.isfinite(shard.rect_vals).all():
        raise ValueError("shard contains non-finite values")
    rect_rows = np.asarray(shard.rect_rows, dtype="<u4")
    rect_cols = np.asarray(shard.rect_cols, dtype="<u4")
    block = np.ascontiguousarray(shard.rect_vals, dtype="<f4")
    head = b"".join([
        SHARD_MAGIC,
        struct.pack("<HBB", WIRE_VERSION, shard.kind, 0),
        struct.pack("<III", shard.round_t, shard.sender, shard.receiver),
        struct.pack("<Q", len(vals)),
        rows.tobytes(), cols.tobytes(), vals.tobytes(),
        struct.pack("<QQ", len(rect_rows), len(rect_cols)),
        rect_rows.tobytes(), rect_cols.tobytes(), block.tobytes(),
    ])
    return head + struct.pack("<I", zlib.crc32(head))


def decode_shard(data: bytes) -> Shard:
    if len(data) < 36:
        raise ProtocolError("shard payload truncated")
    if data[:8] != SHARD_MAGIC:
        raise ProtocolError("bad shard magic")
    if zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise ProtocolError("shard checksum mismatch")
    version, kind, _pad = struct.unpack_from("<HBB", data, 8)
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported shard version {version}")
    round_t, sender, receiver = struct.unpack_from("<III", data, 12)
    off = 24
    (n_cells,) = struct.unpack_from("<Q", data, off)
    off += 8

    def take(dtype, count):
        nonlocal off
        itemsize = np.dtype(dtype).itemsize
        end = off + itemsize * count
        if end > len(data) - 4:
            raise ProtocolError("shard payload truncated")
        arr = np.frombuffer(data, dtype, count, off)
        off = end
        return arr

    rows = take("<u4", n_cells).astype(np.int64)
    cols = take("<u4", n_cells).astype(np.int64)
    vals = take("<f4", n_cells).astype(np.float64)
    nr, nc = struct.unpack_from("<QQ", data, off)
    off += 16
    rect_rows = take("<u4", nr).astype(np.int64)
    rect_cols = take("<u4", nc).astype(np.int64)
    block = take("<f4", nr * nc).astype(np.float64).reshape(nr, nc)
    if off != len(data) - 4:
        raise ProtocolError("trailing bytes in shard payload")
    return Shard(kind=kind, sender=sender, receiver=receiver, round_t=round_t,
                 cell_rows=rows, cell_cols=cols, cell_vals=vals,
                 rect_rows=rect_rows, rect_cols=rect_cols, rect_vals=block)


def encode_envelope(env: Envelope) -> bytes:
    parts = [struct.pack("<HBIII", env.version, env.kind, env.round_t,
                         env.sender, env.receiver),
             struct.pack("<I", len(env.shards))]
    for shard in env.shards:
        payload = encode_shard(shard)
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    reason = env.reason.encode("utf-8")
    parts.append(struct.pack("<I", len(reason)))
    parts.append(reason)
    return b"".join(parts)


def decode_envelope(data: bytes) -> Envelope:
    if len(data) < 18:
        raise ProtocolError("envelope truncated")
    version, kind, round_t, sender, receiver = struct.unpack_from("<HBIII", data, 0)
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported envelope version {version}")
    (count,) = struct.unpack_from("<I", data, 15)
    off = 19
    shards = []
    for _ in range(count):
        (plen,) = struct.unpack_from("<Q", data, off)
        off += 8
        shards.append(decode_shard(data[off:off + plen]))
        off += plen
    (rlen,) = struct.unpack_from("<I", data, off)
    off += 4
    reason = data[off:off + rlen].decode("utf-8")
    return Envelope(kind=kind, round_t=round_t, sender=sender, receiver=receiver,
                    shards=shards, version=version, reason=reason)


class BusEndpoint:
    """Per-domain bus handle; collect() is the protocol's round barrier."""

    def __init__(self, domain_id, n_domains):
        self.domain_id = domain_id
        self.n_domains = n_domains
        self._inbox = queue.Queue()
        self._pending = {}
        self._seen = set()

    # -- sending ---------------------------------------------------------
    def _send_bytes(self, receiver, data):
        raise NotImplementedError

    def broadcast(self, round_t, kind, shards_by_receiver):
        """Send one envelope per receiver; each may carry several shards."""
        for receiver, shards in sorted(shards_by_receiver.items()):
            if receiver == self.domain_id:
                raise ProtocolError("a domain does not message itself")
            shards = shards if isinstance(shards, list) else [shards]
            env = Envelope(kind=kind, round_t=round_t, sender=self.domain_id,
                           receiver=receiver, shards=shards)
            self._send_bytes(receiver, encode_envelope(env))

    def send_abort(self, reason):
        for receiver in range(self.n_domains):
            if receiver != self.domain_id:
                env = Envelope(kind=KIND_ABORT, round_t=0, sender=self.domain_id,
                               receiver=receiver, shards=[], reason=reason)
                try:
                    self._send_bytes(receiver, encode_envelope(env))
                except Exception:
                    pass  # best effort: peers may already be gone

    # -- receiving -------------------------------------------------------
    def collect(self, round_t, kind, expected_senders, timeout=120.0):
        """Block until one envelope per expected sender arrived; returns
        {sender: [shards]}.  Out-of-phase envelopes are buffered."""
        deadline = None if timeout is None else _now() + timeout
        expected = set(expected_senders)
        got = {}
        for sender in list(expected):
            key = (round_t, kind, sender)
            if key in self._pending:
                got[sender] = self._pending.pop(key)
                expected.remove(sender)
        while expected:
            remaining = None if deadline is None else deadline - _now()
            if remaining is not None and remaining <= 0:
                raise ProtocolTimeout(
                    f"domain {self.domain_id} timed out waiting for "
                    f"{KIND_NAMES[kind]} of round {round_t} from {sorted(expected)}")
            try:
                data = self._inbox.get(timeout=remaining)
            except queue.Empty:
                raise ProtocolTimeout(
                    f"domain {self.domain_id} timed out waiting for "
                    f"{KIND_NAMES[kind]} of round {round_t} from {sorted(expected)}") from None
            env = decode_envelope(data)
            if env.kind == KIND_ABORT:
                raise ProtocolAbort(
                    f"abort from domain {env.sender}: {env.reason}")
            if env.receiver != self.domain_id:
                raise ProtocolError("misrouted envelope")
            key = (env.round_t, env.kind, env.sender)
            if key in self._seen:
                raise ProtocolError(f"duplicate message {key}")
            self._seen.add(key)
            if env.kind == kind and env.round_t == round_t and env.sender in expected:
                got[env.sender] = env.shards
                expected.remove(env.sender)
            else:
                self._pending[key] = env.shards
        return got

    def deliver(self, data):
        self._inbox.put(data)

    def close(self):
        pass


def _now():
    import time
    return time.monotonic()


class InProcessBus:
    """Queue-backed bus; still encodes envelopes so taps and float rounding
    behave exactly like the TCP backend."""

    def __init__(self, n_domains):
        self.n_domains = n_domains
        self._endpoints = {}
        self.taps = []

    def endpoint(self, domain_id) -> "InProcessEndpoint":
        if domain_id in self._endpoints:
            raise ProtocolError(f"domain {domain_id} already registered")
        if not 0 <= domain_id < self.n_domains:
            raise ProtocolError("domain id out of range")
        ep = InProcessEndpoint(domain_id, self.n_domains, self)
        self._endpoints[domain_id] = ep
        return ep

    def route(self, receiver, data):
        for tap in self.taps:
            tap(data)
        try:
            self._endpoints[receiver].deliver(data)
        except KeyError:
            raise ProtocolError(f"receiver {receiver} is not registered") from None

    def close(self):
        self._endpoints.clear()


class InProcessEndpoint(BusEndpoint):
    def __init__(self, domain_id, n_domains, bus):
        super().__init__(domain_id, n_domains)
        self._bus = bus

    def _send_bytes(self, receiver, data):
        self._bus.route(receiver, data)


# ---------------------------------------------------------------------------
# TCP backend: a hub relays frames between per-ordered-pair connections.
# ---------------------------------------------------------------------------

def _read_exact(sock, n):
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return buf


def _read_frame(sock):
    (length,) = struct.unpack(">I", _read_exact(sock, 4))
    return _read_exact(sock, length)


def _write_frame(sock, lock, data):
    with lock:
        sock.sendall(struct.pack(">I", len(data)) + data)


class TcpHub:
    """Relay process core: owns one socket per ordered domain pair.

    A frame arriving on the (k, l) connection is forwarded down the (l, k)
    connection, so every domain reads its inbound traffic from the
    connections it owns.
    """

    def __init__(self, host="127.0.0.1", port=DEFAULT_TCP_PORT):
        self._server = socket.create_server((host, port))
        self.address = self._server.getsockname()
        self._conns = {}
        self._locks = {}
        self._ready = {}
        self._registry_lock = threading.Lock()
        self._threads = []
        self._closing = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self):
        while not self._closing.is_set():
            try:
                conn, _addr = self._server.accept()
            except OSError:
                return
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn):
        try:
            owner, peer = struct.unpack("<II", _read_exact(conn, 8))
            with self._registry_lock:
                self._conns[(owner, peer)] = conn
                self._locks[(owner, peer)] = threading.Lock()
                event = self._ready.setdefault((owner, peer), threading.Event())
                event.set()
                target_event = self._ready.setdefault((peer, owner), threading.Event())
            while True:
                frame = _read_frame(conn)
                # Wait for the counterpart connection before forwarding.
                if not target_event.wait(timeout=60.0):
                    raise ConnectionError(f"pair ({peer}, {owner}) never registered")
                _write_frame(self._conns[(peer, owner)], self._locks[(peer, owner)], frame)
        except (ConnectionError, OSError):
            pass
        finally:
            conn.close()

    def close(self):
        self._closing.set()
        self._server.close()
        with self._registry_lock:
            for conn in self._conns.values():
                try:
                    conn.close()
                except OSError:
                    pass


class TcpBus:
    """Client-side factory mirroring InProcessBus."""

    def __init__(self, n_domains, host="127.0.0.1", port=DEFAULT_TCP_PORT):
        self.n_domains = n_domains
        self.host, self.port = host, port
        self.taps = []

    def endpoint(self, domain_id) -> "TcpEndpoint":
        return TcpEndpoint(domain_id, self.n_domains, self.host, self.port, self.taps)

    def close(self):
        pass


class TcpEndpoint(BusEndpoint):
    def __init__(self, domain_id, n_domains, host, port, taps=()):
        super().__init__(domain_id, n_domains)
        self._socks = {}
        self._locks = {}
        self._taps = taps
        self._readers = []
        for peer in range(n_domains):
            if peer == domain_id:
                continue
            sock = socket.create_connection((host, port))
            sock.sendall(struct.pack("<II", domain_id, peer))
            self._socks[peer] = sock
            self._locks[peer] = threading.Lock()
            t = threading.Thread(target=self._reader, args=(sock,), daemon=True)
            t.start()
            self._readers.append(t)

    def _reader(self, sock):
        try:
            while True:
                self.deliver(_read_frame(sock))
        except (ConnectionError, OSError):
            return

    def _send_bytes(self, receiver, data):
        for tap in self._taps:
            tap(data)
        _write_frame(self._socks[receiver], self._locks[receiver], data)

    def close(self):
        for sock in self._socks.values():
            try:
                sock.close()
            except OSError:
                pass
