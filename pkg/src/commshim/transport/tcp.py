"""Socket transport: one TCP byte stream per rank pair.

Every post becomes one wire frame: a fixed little-endian header
``magic 0x4D344431, u8 version, u32 channel id, u32 tag, u8 memory domain,
u64 length`` followed by the payload bytes.  Frames are demultiplexed into a
per-process inbox keyed by ``(channel, peer, tag)``, which gives the exact
FIFO matching contract of the simulated transport over real sockets.

The rank-to-address map comes from a hostfile-style text file with one
``rank host port`` triple per line (see :func:`load_hostfile`).

Connection setup is lazy and non-blocking: the constructor only binds the
listening socket; ``progress()`` accepts peers and dials every lower rank
until the full mesh is up (higher ranks connect to lower ones, so each pair
shares a single stream).  ``wait_ready`` blocks a standalone process until
the mesh is complete.
"""

from __future__ import annotations

import errno
import socket
import struct
import time
from collections import deque

from ..errors import (
    CommClosedError,
    ConfigurationError,
    ProtocolError,
    StartupError,
    TransferError,
    TruncationError,
    UsageError,
)
from ..loop import MonotonicClock
from .base import (
    DEFAULT_MAX_COUNT,
    MemoryDomain,
    Transport,
    TransferRequest,
    as_view,
)

WIRE_MAGIC = 0x4D344431  # "M4D1"
WIRE_VERSION = 1
FRAME_HEADER = struct.Struct("<IBIIBQ")  # magic, version, channel, tag, domain, length

_HELLO_CHANNEL = 0
_HELLO_TAG = 0
_DIAL_RETRY_SECONDS = 0.05
_READ_SIZE = 1 << 16


def pack_frame_header(channel: int, tag: int, domain: int, length: int) -> bytes:
    return FRAME_HEADER.pack(WIRE_MAGIC, WIRE_VERSION, channel, tag, domain, length)


def load_hostfile(path: str) -> dict[int, tuple[str, int]]:
    """Parse ``rank host port`` lines; '#' starts a comment."""
    rank_map: dict[int, tuple[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ConfigurationError(f"{path}:{lineno}: expected 'rank host port'")
            rank, host, port = parts
            rank_map[int(rank)] = (host, int(port))
    return rank_map


def write_hostfile(path: str, rank_map: dict[int, tuple[str, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rank in sorted(rank_map):
            host, port = rank_map[rank]
            fh.write(f"{rank} {host} {port}\n")


class _Parser:
    """Incremental frame parser over a byte stream."""

    __slots__ = ("buffer",)

    def __init__(self):
        self.buffer = bytearray()

    def feed(self, data: bytes) -> None:
        self.buffer.extend(data)

    def next_frame(self, max_length: int):
        if len(self.buffer) < FRAME_HEADER.size:
            return None
        magic, version, channel, tag, domain, length = FRAME_HEADER.unpack_from(self.buffer)
        if magic != WIRE_MAGIC:
            raise ProtocolError(f"bad frame magic 0x{magic:08X}")
        if version != WIRE_VERSION:
            raise ProtocolError(f"unsupported wire version {version}", expected=WIRE_VERSION, actual=version)
        if length > max_length:
            raise ProtocolError(f"frame length {length} exceeds limit", expected=max_length, actual=length)
        total = FRAME_HEADER.size + length
        if len(self.buffer) < total:
            return None
        payload = bytes(self.buffer[FRAME_HEADER.size : total])
        del self.buffer[:total]
        return channel, tag, MemoryDomain(domain), payload


class _OutItem:
    """One queued wire segment; ``req`` completes when its last byte leaves."""

    __slots__ = ("data", "sent", "req")

    def __init__(self, data, req: TransferRequest | None = None):
        self.data = memoryview(data)
        self.sent = 0
        self.req = req


class SocketTransport(Transport):
    def __init__(self, world_size: int, rank: int, rank_map: dict[int, tuple[str, int]],
                 *, max_count: int = DEFAULT_MAX_COUNT, device_aware: bool = False,
                 connect_timeout: float = 5.0, clock=None):
        super().__init__(world_size, rank, max_count, device_aware,
                         clock if clock is not None else MonotonicClock())
        missing = [r for r in range(world_size) if r not in rank_map]
        if missing:
            raise ConfigurationError(f"rank map lacks entries for ranks {missing}")
        self.rank_map = dict(rank_map)
        self.connect_timeout = connect_timeout
        self._deadline = time.monotonic() + connect_timeout
        self._socks: dict[int, socket.socket] = {}
        self._parsers: dict[int, _Parser] = {}
        self._dead_peers: set[int] = set()
        self._outq: dict[int, deque[_OutItem]] = {p: deque() for p in range(world_size) if p != rank}
        self._inbox: dict[tuple[int, int, int], deque[tuple[bytes, MemoryDomain]]] = {}
        self._recvq: dict[tuple[int, int, int], deque[TransferRequest]] = {}
        self._dialing: dict[int, socket.socket] = {}
        self._next_dial: dict[int, float] = {p: 0.0 for p in range(rank) }
        self._pending_hello: list[tuple[socket.socket, _Parser]] = []

        host, port = rank_map[rank]
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._listener.bind((host, port))
        except OSError as exc:
            self._listener.close()
            raise ConfigurationError(
                f"cannot bind rank {rank} to {host}:{port} (rank collision?): {exc}"
            ) from exc
        self._listener.listen(world_size + 8)
        self._listener.setblocking(False)

    # -- mesh management -----------------------------------------------------

    @property
    def mesh_ready(self) -> bool:
        return len(self._socks) == self.world_size - 1

    def wait_ready(self, timeout: float | None = None) -> None:
        """Block this process until every peer stream is up."""
        deadline = time.monotonic() + (timeout if timeout is not None else self.connect_timeout)
        while not self.mesh_ready:
            self.progress()
            if time.monotonic() > deadline:
                missing = sorted(set(range(self.world_size)) - {self.rank} - set(self._socks))
                raise StartupError(f"rank {missing[0]} unreachable during startup", rank=missing[0])
            time.sleep(0.002)

    def _accept_new(self) -> None:
        while True:
            try:
                conn, _addr = self._listener.accept()
            except (BlockingIOError, InterruptedError):
                return
            except OSError:
                return
            conn.setblocking(False)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._pending_hello.append((conn, _Parser()))

    def _read_hellos(self) -> None:
        still_waiting = []
        for conn, parser in self._pending_hello:
            try:
                data = conn.recv(_READ_SIZE)
            except (BlockingIOError, InterruptedError):
                still_waiting.append((conn, parser))
                continue
            except OSError:
                conn.close()
                continue
            if data:
                parser.feed(data)
            frame = parser.next_frame(64)
            if frame is None:
                if not data:
                    conn.close()  # closed before completing the hello
                else:
                    still_waiting.append((conn, parser))
                continue
            channel, tag, _domain, payload = frame
            if channel != _HELLO_CHANNEL or tag != _HELLO_TAG or len(payload) != 8:
                conn.close()
                raise ProtocolError("malformed hello frame during connection setup")
            peer = int.from_bytes(payload, "little")
            if peer == self.rank or peer in self._socks:
                conn.close()
                raise ConfigurationError(f"duplicate hello for rank {peer}: rank collision")
            if not 0 <= peer < self.world_size:
                conn.close()
                raise ConfigurationError(f"hello from unknown rank {peer}")
            self._adopt(peer, conn, parser)
        self._pending_hello = still_waiting

    def _dial_lower(self) -> None:
        now = time.monotonic()
        for peer in range(self.rank):
            if peer in self._socks or peer in self._dead_peers:
                continue
            sock = self._dialing.get(peer)
            if sock is None:
                if now < self._next_dial[peer]:
                    continue
                sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                sock.setblocking(False)
                err = sock.connect_ex(self.rank_map[peer])
                if err in (0, errno.EINPROGRESS, errno.EWOULDBLOCK):
                    self._dialing[peer] = sock
                else:
                    sock.close()
                    self._next_dial[peer] = now + _DIAL_RETRY_SECONDS
                continue
            err = sock.getsockopt(socket.SOL_SOCKET, socket.SO_ERROR)
            if err == 0:
                try:
                    sock.getpeername()
                except OSError:
                    continue  # still connecting
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                hello = pack_frame_header(_HELLO_CHANNEL, _HELLO_TAG, 0, 8) + \
                    self.rank.to_bytes(8, "little")
                self._adopt(peer, sock, _Parser())
                del self._dialing[peer]
                self._outq[peer].appendleft(_OutItem(hello))
            elif err in (errno.EINPROGRESS, errno.EALREADY, errno.EWOULDBLOCK):
                continue
            else:
                sock.close()
                del self._dialing[peer]
                self._next_dial[peer] = now + _DIAL_RETRY_SECONDS

    def _adopt(self, peer: int, conn: socket.socket, parser: _Parser) -> None:
        self._socks[peer] = conn
        self._parsers[peer] = parser

    # -- posting ---------------------------------------------------------------

    def post_send(self, channel: int, peer: int, tag: int, data,
                  domain: MemoryDomain = MemoryDomain.HOST) -> TransferRequest:
        view = as_view(data)
        self._check_post(channel, peer, tag, view)
        req = TransferRequest(self, "send", channel, peer, tag, view, domain)
        if peer in self._dead_peers:
            req._finish(TransferRequest.FAILED, 0, CommClosedError(f"rank {peer} connection closed"))
            return self._track(req)
        payload, _staged = self._stage_if_needed(view, domain)
        header = pack_frame_header(channel, tag, int(domain), len(view))
        queue = self._outq[peer]
        queue.append(_OutItem(header))
        queue.append(_OutItem(payload if len(payload) else b"", req))
        return self._track(req)

    def post_recv(self, channel: int, peer: int, tag: int, buffer,
                  domain: MemoryDomain = MemoryDomain.HOST) -> TransferRequest:
        view = as_view(buffer)
        if view.readonly:
            raise UsageError("receive buffer must be writable")
        self._check_post(channel, peer, tag, view)
        req = TransferRequest(self, "recv", channel, peer, tag, view, domain)
        key = (channel, peer, tag)
        waiting = self._inbox.get(key)
        if waiting:
            payload, wire_domain = waiting.popleft()
            if not waiting:
                del self._inbox[key]
            self._deliver(req, payload, wire_domain)
        elif peer in self._dead_peers:
            req._finish(TransferRequest.FAILED, 0, CommClosedError(f"rank {peer} connection closed"))
        else:
            self._recvq.setdefault(key, deque()).append(req)
        return self._track(req)

    def cancel(self, request: TransferRequest) -> bool:
        if request._owner is not self:
            raise UsageError("request belongs to a different transport")
        if not request.pending:
            return False
        if request.direction == "recv":
            key = (request.channel, request.peer, request.tag)
            queue = self._recvq.get(key)
            if queue and request in queue:
                queue.remove(request)
                self._cancelled(request)
                return True
            return False
        queue = self._outq.get(request.peer)
        if queue is None:
            return False
        for item in queue:
            if item.req is request and item.sent == 0:
                # Drop the payload segment and its preceding header.
                idx = list(queue).index(item)
                if idx > 0 and queue[idx - 1].req is None and queue[idx - 1].sent == 0:
                    del queue[idx]
                    del queue[idx - 1]
                    self._cancelled(request)
                    return True
        return False

    def purge_channel(self, channel: int) -> None:
        for key in [k for k in self._inbox if k[0] == channel]:
            del self._inbox[key]
        for key in [k for k in self._recvq if k[0] == channel]:
            for req in self._recvq[key]:
                self._cancelled(req)
            del self._recvq[key]

    # -- progress ----------------------------------------------------------------

    def progress(self) -> int:
        """Flush pending sends and drain readable peers; returns completions."""
        self._accept_new()
        self._read_hellos()
        self._dial_lower()
        completed = 0
        for peer in sorted(self._socks):
            completed += self._flush(peer)
        for peer in sorted(self._socks):
            completed += self._drain(peer)
        return completed

    def _flush(self, peer: int) -> int:
        sock = self._socks.get(peer)
        queue = self._outq[peer]
        completed = 0
        while queue and sock is not None:
            item = queue[0]
            if item.sent == len(item.data):
                queue.popleft()
                if item.req is not None and item.req.pending:
                    item.req._finish(TransferRequest.COMPLETE, item.req.length)
                    self.metrics.sends_completed += 1
                    self.metrics.bytes_sent += item.req.length
                    completed += 1
                continue
            try:
                n = sock.send(item.data[item.sent :])
            except (BlockingIOError, InterruptedError):
                break
            except OSError:
                self._mark_dead(peer)
                break
            if n == 0:
                break
            item.sent += n
        return completed

    def _drain(self, peer: int) -> int:
        sock = self._socks.get(peer)
        if sock is None:
            return 0
        parser = self._parsers[peer]
        completed = 0
        while True:
            try:
                data = sock.recv(_READ_SIZE)
            except (BlockingIOError, InterruptedError):
                break
            except OSError:
                self._mark_dead(peer)
                return completed
            if not data:
                self._mark_dead(peer)
                return completed
            parser.feed(data)
        while True:
            frame = parser.next_frame(self.max_count + 64)
            if frame is None:
                break
            channel, tag, domain, payload = frame
            key = (channel, peer, tag)
            queue = self._recvq.get(key)
            if queue:
                req = queue.popleft()
                if not queue:
                    del self._recvq[key]
                self._deliver(req, payload, domain)
                completed += 1
            else:
                self._inbox.setdefault(key, deque()).append((payload, domain))
        return completed

    def _deliver(self, req: TransferRequest, payload: bytes, _wire_domain: MemoryDomain) -> None:
        if len(payload) > req.length:
            req._finish(TransferRequest.FAILED, 0, TruncationError(
                f"incoming {len(payload)} bytes exceed posted buffer of {req.length}"))
            return
        if req._domain == MemoryDomain.DEVICE_SIM and not self.device_aware:
            self.metrics.staging_copies += 1
            self.metrics.staged_bytes += len(payload)
        req._view[: len(payload)] = payload
        self.metrics.recvs_completed += 1
        self.metrics.bytes_received += len(payload)
        req._finish(TransferRequest.COMPLETE, len(payload))

    def _mark_dead(self, peer: int) -> None:
        sock = self._socks.pop(peer, None)
        if sock is not None:
            sock.close()
        self._parsers.pop(peer, None)
        self._dead_peers.add(peer)
        for key, queue in list(self._recvq.items()):
            if key[1] != peer:
                continue
            for req in queue:
                req._finish(TransferRequest.FAILED, 0,
                            TransferError(f"rank {peer} closed the connection"))
            del self._recvq[key]
        for item in self._outq[peer]:
            if item.req is not None and item.req.pending:
                item.req._finish(TransferRequest.FAILED, item.sent,
                                 TransferError(f"rank {peer} closed the connection",
                                               bytes_moved=item.sent))
        self._outq[peer].clear()

    def close(self) -> None:
        for sock in self._socks.values():
            try:
                sock.close()
            except OSError:
                pass
        for sock in self._dialing.values():
            sock.close()
        for conn, _ in self._pending_hello:
            conn.close()
        self._socks.clear()
        self._dialing.clear()
        self._pending_hello.clear()
        try:
            self._listener.close()
        except OSError:
            pass
