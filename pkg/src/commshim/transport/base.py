"""Non-blocking point-to-point transport contract.

A transport moves byte regions between ranks over *channels*: isolated
contexts identified by an integer id.  Matching is exact on
``(channel, peer, tag)`` with FIFO order, no wildcards.  All posts return a
:class:`TransferRequest` immediately; completion is observed through
``test()``/``progress()``, which are also the cooperative-progress hooks.

Every operation must be called from the single task executor of the owning
process.  A transport may be shared across executors only if the caller
serializes access externally; nothing here enforces that.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

from ..errors import (
    ChannelError,
    CountOverflowError,
    CancelledTransferError,
    UsageError,
)
from ..loop import Future

WORLD_CHANNEL = 0
DEFAULT_MAX_COUNT = 2**31 - 1
# Tags below this value belong to the framework (handshake, message headers).
RESERVED_TAG_LIMIT = 16
MAX_TAG = 2**31 - 1


class MemoryDomain(enum.IntEnum):
    HOST = 0
    DEVICE_SIM = 1


class DeviceRegion:
    """Offset-addressed simulated device allocation.

    Stands in for device memory that is not sliceable like a host array:
    access goes through explicit ``window(offset, length)`` views, which is
    how chunked transfers walk it.  Backed by ordinary host bytes.
    """

    __slots__ = ("_mem",)

    def __init__(self, size_or_bytes):
        if isinstance(size_or_bytes, int):
            self._mem = bytearray(size_or_bytes)
        else:
            self._mem = bytearray(size_or_bytes)

    @property
    def nbytes(self) -> int:
        return len(self._mem)

    def window(self, offset: int = 0, length: int | None = None) -> memoryview:
        if length is None:
            length = len(self._mem) - offset
        if offset < 0 or length < 0 or offset + length > len(self._mem):
            raise UsageError(
                f"window [{offset}, {offset + length}) outside region of {len(self._mem)} bytes"
            )
        return memoryview(self._mem)[offset : offset + length]

    def to_bytes(self) -> bytes:
        return bytes(self._mem)


@dataclass(frozen=True)
class LinkModel:
    """Cost model of one simulated link, SI units.

    ``latency`` seconds per transfer, ``bandwidth`` bytes per second,
    ``per_chunk_overhead`` seconds per post, and ``staging_penalty`` seconds
    per byte whenever a device-domain region has to bounce through host
    memory because the transport is not device aware.
    """

    latency: float = 0.0
    bandwidth: float = 1e9
    per_chunk_overhead: float = 0.0
    staging_penalty: float = 0.0

    def __post_init__(self):
        if self.latency < 0 or self.per_chunk_overhead < 0 or self.staging_penalty < 0:
            raise UsageError("link model times must be non-negative")
        if self.bandwidth <= 0:
            raise UsageError("link bandwidth must be positive")


@dataclass
class TransportMetrics:
    staging_copies: int = 0
    staged_bytes: int = 0
    sends_completed: int = 0
    recvs_completed: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0


class TransferRequest:
    """Handle on one pending non-blocking transfer."""

    PENDING = "pending"
    COMPLETE = "complete"
    FAILED = "failed"

    __slots__ = (
        "id",
        "direction",
        "channel",
        "peer",
        "tag",
        "length",
        "state",
        "bytes_moved",
        "error",
        "_owner",
        "_view",
        "_domain",
        "_waiters",
    )

    _ids = itertools.count(1)

    def __init__(self, owner, direction: str, channel: int, peer: int, tag: int,
                 view: memoryview, domain: MemoryDomain):
        self.id = next(TransferRequest._ids)
        self.direction = direction
        self.channel = channel
        self.peer = peer
        self.tag = tag
        self.length = len(view)
        self.state = TransferRequest.PENDING
        self.bytes_moved = 0
        self.error: Exception | None = None
        self._owner = owner
        self._view = view
        self._domain = domain
        self._waiters: list[Future] = []

    @property
    def pending(self) -> bool:
        return self.state == TransferRequest.PENDING

    @property
    def failed(self) -> bool:
        return self.state == TransferRequest.FAILED

    def add_waiter(self, fut: Future) -> None:
        if self.state != TransferRequest.PENDING:
            fut.set_result(None)
        else:
            self._waiters.append(fut)

    def _finish(self, state: str, bytes_moved: int, error: Exception | None = None) -> None:
        assert self.state == TransferRequest.PENDING, "requests only transition once"
        self.state = state
        self.bytes_moved = bytes_moved
        self.error = error
        waiters, self._waiters = self._waiters, []
        for fut in waiters:
            fut.set_result(None)

    def __repr__(self):
        return (
            f"<TransferRequest #{self.id} {self.direction} ch={self.channel} "
            f"peer={self.peer} tag={self.tag} len={self.length} {self.state}>"
        )


def as_view(data) -> memoryview:
    """Normalize payload objects to a C-contiguous byte memoryview."""
    if isinstance(data, DeviceRegion):
        return data.window()
    view = memoryview(data)
    if view.ndim != 1 or view.itemsize != 1:
        view = view.cast("B")
    return view


@dataclass
class TransportConfig:
    """Startup settings; every rank of a world must use identical values."""

    kind: str = "sim"
    max_count: int = DEFAULT_MAX_COUNT
    device_aware: bool = False
    link: LinkModel = field(default_factory=LinkModel)
    fabric: object | None = None  # sim: shared in-process world
    rank_map: dict[int, tuple[str, int]] | None = None  # socket: rank -> (host, port)
    connect_timeout: float = 5.0


class Transport:
    """Shared bookkeeping for both transports; subclasses move the bytes."""

    def __init__(self, world_size: int, rank: int, max_count: int, device_aware: bool, clock):
        if world_size < 1:
            raise UsageError("world_size must be at least 1")
        if not 0 <= rank < world_size:
            raise UsageError(f"rank {rank} outside world of size {world_size}")
        if not 1 <= max_count <= DEFAULT_MAX_COUNT:
            raise UsageError(f"max_count must be in [1, {DEFAULT_MAX_COUNT}]")
        self.world_size = world_size
        self.rank = rank
        self.max_count = max_count
        self.device_aware = device_aware
        self.clock = clock
        self.metrics = TransportMetrics()
        # channel id -> peer rank this end reaches through it; the world
        # channel (id 0) reaches every peer and is handled specially.
        self._channels: dict[int, int] = {}
        self._pending: dict[int, int] = {}  # channel id -> pending request count

    # -- channel registry ---------------------------------------------------

    def register_channel(self, channel: int, peer: int) -> None:
        if peer == self.rank or not 0 <= peer < self.world_size:
            raise UsageError(f"cannot register channel {channel} to peer {peer}")
        self._channels[channel] = peer

    def deregister_channel(self, channel: int) -> None:
        if channel == WORLD_CHANNEL:
            raise UsageError("the world channel cannot be deregistered")
        self._channels.pop(channel, None)

    def channel_peer(self, channel: int) -> int | None:
        return self._channels.get(channel)

    def _check_route(self, channel: int, peer: int) -> None:
        if peer == self.rank:
            raise UsageError("cannot address self")
        if not 0 <= peer < self.world_size:
            raise UsageError(f"peer {peer} outside world of size {self.world_size}")
        if channel == WORLD_CHANNEL:
            return
        registered = self._channels.get(channel)
        if registered is None:
            raise ChannelError(f"channel {channel} is not registered with this transport")
        if registered != peer:
            raise ChannelError(f"channel {channel} connects to rank {registered}, not {peer}")

    def _check_post(self, channel: int, peer: int, tag: int, view: memoryview) -> None:
        self._check_route(channel, peer)
        if not 0 <= tag <= MAX_TAG:
            raise UsageError(f"tag {tag} outside [0, {MAX_TAG}]")
        if len(view) > self.max_count:
            raise CountOverflowError(len(view), self.max_count)

    def _track(self, req: TransferRequest) -> TransferRequest:
        self._pending[req.channel] = self._pending.get(req.channel, 0) + 1
        req.add_waiter(_PendingDrop(self, req.channel))
        return req

    def has_pending(self, channel: int | None = None) -> bool:
        if channel is None:
            return any(n > 0 for n in self._pending.values())
        return self._pending.get(channel, 0) > 0

    # -- contract -----------------------------------------------------------

    def post_send(self, channel: int, peer: int, tag: int, data,
                  domain: MemoryDomain = MemoryDomain.HOST) -> TransferRequest:
        raise NotImplementedError

    def post_recv(self, channel: int, peer: int, tag: int, buffer,
                  domain: MemoryDomain = MemoryDomain.HOST) -> TransferRequest:
        raise NotImplementedError

    def progress(self) -> int:
        raise NotImplementedError

    def test(self, request: TransferRequest) -> bool:
        """Non-blocking completion check; every call drives progress."""
        if request._owner is not self:
            raise UsageError("request belongs to a different transport")
        if request.state == TransferRequest.PENDING:
            self.progress()
        return request.state != TransferRequest.PENDING

    def cancel(self, request: TransferRequest) -> bool:
        """Retract an unmatched request; returns False if it already left pending."""
        raise NotImplementedError

    def purge_channel(self, channel: int) -> None:
        """Drop stale unmatched state for a channel id about to be revived."""

    def close(self) -> None:
        pass

    def _stage_if_needed(self, view: memoryview, domain: MemoryDomain) -> tuple[memoryview, bool]:
        """Bounce a device region through host memory when not device aware."""
        if domain == MemoryDomain.DEVICE_SIM and not self.device_aware:
            bounce = bytearray(view)
            self.metrics.staging_copies += 1
            self.metrics.staged_bytes += len(view)
            return memoryview(bounce), True
        return view, False

    def _cancelled(self, req: TransferRequest) -> None:
        req._finish(TransferRequest.FAILED, 0, CancelledTransferError("transfer cancelled"))


class _PendingDrop:
    """Done-callback shim that decrements the per-channel pending counter."""

    __slots__ = ("transport", "channel")

    def __init__(self, transport: Transport, channel: int):
        self.transport = transport
        self.channel = channel

    def set_result(self, _value) -> None:
        counts = self.transport._pending
        counts[self.channel] -= 1
        if counts[self.channel] == 0:
            del counts[self.channel]
