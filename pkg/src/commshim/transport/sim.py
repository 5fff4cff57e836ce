"""In-process simulated transport over a discrete-event link model.

All ranks of a world live in one process and share a :class:`SimFabric`.
Matching a send with a recv stamps the pair with a completion time computed
from the link model; ``progress()`` advances the virtual clock to the next
stamp and delivers everything that is ripe.  Timing is therefore exact in
clock ticks (1 tick = 1 ns) and runs take no wall time.
"""

from __future__ import annotations

import heapq
import math
from collections import deque

from ..errors import ConfigurationError, TruncationError, UsageError
from ..loop import TICKS_PER_SECOND, VirtualClock
from .base import (
    DEFAULT_MAX_COUNT,
    LinkModel,
    MemoryDomain,
    Transport,
    TransferRequest,
    as_view,
)


def _ticks(seconds: float) -> int:
    return round(seconds * TICKS_PER_SECOND)


def _transmission_ticks(size: int, bandwidth: float) -> int:
    # Integer path keeps stamps exact for the usual whole-number bandwidths.
    if float(bandwidth).is_integer():
        return -(-size * TICKS_PER_SECOND // int(bandwidth))
    return math.ceil(size * TICKS_PER_SECOND / bandwidth)


class _MatchedPair:
    __slots__ = ("send", "recv", "payload", "staged_sides")

    def __init__(self, send: TransferRequest, recv: TransferRequest,
                 payload: memoryview, staged_sides: int):
        self.send = send
        self.recv = recv
        self.payload = payload
        self.staged_sides = staged_sides


class SimFabric:
    """Shared world state: per-rank transports, match queues, event heap."""

    def __init__(self, world_size: int, *, link: LinkModel | None = None,
                 clock: VirtualClock | None = None,
                 max_count: int = DEFAULT_MAX_COUNT,
                 device_aware: bool = False):
        if world_size < 1:
            raise UsageError("world_size must be at least 1")
        self.world_size = world_size
        self.link = link if link is not None else LinkModel()
        self.clock = clock if clock is not None else VirtualClock()
        self.max_count = max_count
        self.device_aware = device_aware
        self._latency_ticks = _ticks(self.link.latency)
        self._overhead_ticks = _ticks(self.link.per_chunk_overhead)
        self._transports: dict[int, SimTransport] = {}
        # (channel, src, dst, tag) -> FIFO of unmatched requests
        self._sends: dict[tuple[int, int, int, int], deque[TransferRequest]] = {}
        self._recvs: dict[tuple[int, int, int, int], deque[TransferRequest]] = {}
        self._events: list[tuple[int, int, _MatchedPair]] = []
        self._event_seq = 0

    def transport(self, rank: int) -> "SimTransport":
        if rank in self._transports:
            raise ConfigurationError(f"rank {rank} already initialized in this world")
        t = SimTransport(self, rank)
        self._transports[rank] = t
        return t

    # -- matching ------------------------------------------------------------

    def post_send(self, req: TransferRequest) -> None:
        key = (req.channel, req._owner.rank, req.peer, req.tag)
        queue = self._recvs.get(key)
        if queue:
            self._match(req, queue.popleft())
        else:
            self._sends.setdefault(key, deque()).append(req)

    def post_recv(self, req: TransferRequest) -> None:
        key = (req.channel, req.peer, req._owner.rank, req.tag)
        queue = self._sends.get(key)
        if queue:
            self._match(queue.popleft(), req)
        else:
            self._recvs.setdefault(key, deque()).append(req)

    def cancel(self, req: TransferRequest) -> bool:
        if not req.pending:
            return False
        if req.direction == "send":
            key = (req.channel, req._owner.rank, req.peer, req.tag)
            table = self._sends
        else:
            key = (req.channel, req.peer, req._owner.rank, req.tag)
            table = self._recvs
        queue = table.get(key)
        if queue is None or req not in queue:
            return False  # already matched; delivery is in flight
        queue.remove(req)
        req._owner._cancelled(req)
        return True

    def _match(self, send: TransferRequest, recv: TransferRequest) -> None:
        if send.length > recv.length:
            err = TruncationError(
                f"incoming {send.length} bytes exceed posted buffer of {recv.length}",
                bytes_moved=0,
            )
            send._finish(TransferRequest.FAILED, 0, err)
            recv._finish(TransferRequest.FAILED, 0, err)
            return

        payload, send_staged = send._owner._stage_if_needed(send._view, send._domain)
        staged_sides = int(send_staged)
        if recv._domain == MemoryDomain.DEVICE_SIM and not recv._owner.device_aware:
            # The receiving side bounces through host memory too.
            recv._owner.metrics.staging_copies += 1
            recv._owner.metrics.staged_bytes += recv.length
            staged_sides += 1

        stamp = (
            self.clock.now()
            + self._latency_ticks
            + _transmission_ticks(send.length, self.link.bandwidth)
            + self._overhead_ticks
            + staged_sides * _ticks(self.link.staging_penalty * send.length)
        )
        self._event_seq += 1
        heapq.heappush(self._events, (stamp, self._event_seq, _MatchedPair(send, recv, payload, staged_sides)))

    # -- progress ------------------------------------------------------------

    def progress(self) -> int:
        """Advance the clock to the next completion and deliver all ripe pairs.

        Returns the number of transfers completed (one matched send/recv pair,
        or one failure, counts once).
        """
        if not self._events:
            return 0
        if self._events[0][0] > self.clock.now():
            self.clock.advance_to(self._events[0][0])
        completed = 0
        while self._events and self._events[0][0] <= self.clock.now():
            _, _, pair = heapq.heappop(self._events)
            self._deliver(pair)
            completed += 1
        return completed

    def _deliver(self, pair: _MatchedPair) -> None:
        send, recv = pair.send, pair.recv
        recv._view[: send.length] = pair.payload
        send._owner.metrics.sends_completed += 1
        send._owner.metrics.bytes_sent += send.length
        recv._owner.metrics.recvs_completed += 1
        recv._owner.metrics.bytes_received += send.length
        send._finish(TransferRequest.COMPLETE, send.length)
        recv._finish(TransferRequest.COMPLETE, send.length)

    def purge(self, channel: int, rank: int) -> None:
        """Drop unmatched requests a rank posted on a channel id being revived."""
        for table in (self._sends, self._recvs):
            for key, queue in list(table.items()):
                if key[0] != channel:
                    continue
                stale = [r for r in queue if r._owner.rank == rank]
                for req in stale:
                    queue.remove(req)
                    req._owner._cancelled(req)

    def has_unmatched(self, channel: int) -> bool:
        for key, queue in self._sends.items():
            if key[0] == channel and queue:
                return True
        for key, queue in self._recvs.items():
            if key[0] == channel and queue:
                return True
        return False


class SimTransport(Transport):
    """Per-rank facade over a shared :class:`SimFabric`."""

    def __init__(self, fabric: SimFabric, rank: int):
        super().__init__(fabric.world_size, rank, fabric.max_count,
                         fabric.device_aware, fabric.clock)
        self.fabric = fabric

    def post_send(self, channel: int, peer: int, tag: int, data,
                  domain: MemoryDomain = MemoryDomain.HOST) -> TransferRequest:
        view = as_view(data)
        self._check_post(channel, peer, tag, view)
        req = TransferRequest(self, "send", channel, peer, tag, view, domain)
        self.fabric.post_send(req)
        return self._track(req)

    def post_recv(self, channel: int, peer: int, tag: int, buffer,
                  domain: MemoryDomain = MemoryDomain.HOST) -> TransferRequest:
        view = as_view(buffer)
        if view.readonly:
            raise UsageError("receive buffer must be writable")
        self._check_post(channel, peer, tag, view)
        req = TransferRequest(self, "recv", channel, peer, tag, view, domain)
        self.fabric.post_recv(req)
        return self._track(req)

    def progress(self) -> int:
        return self.fabric.progress()

    def cancel(self, request: TransferRequest) -> bool:
        if request._owner is not self:
            raise UsageError("request belongs to a different transport")
        return self.fabric.cancel(request)

    def purge_channel(self, channel: int) -> None:
        self.fabric.purge(channel, self.rank)
