"""Connection-oriented endpoints over duplicated channels.

A listener accepts handshakes on the reserved control tag of each pair's
base channel; a connector proposes a connection id, the listener replies
with the id and the generation it allocated, and both sides then duplicate
the base channel to that generation, so the new channel id is identical at
both ends without any further coordination.  Every dynamic connection gets
its own isolated channel; base channels never carry endpoint traffic.

Closing posts an end-of-stream marker and hands the background reaper the
job of waiting for the peer's marker before returning the duplicate to the
cache, which keeps released ids quiescent before reuse.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass

from .channels import Channel, CommTable
from .errors import (
    AddressParseError,
    CancelledTransferError,
    CommClosedError,
    CommShimError,
    ConnectRefused,
    UsageError,
)
from .loop import WaitTimeout, current_loop, sleep, wait_for
from .messaging import (
    HANDSHAKE_TAG,
    MESSAGE_TAG,
    EndOfStreamReceived,
    Message,
    await_request,
    read_message,
    write_message,
)
from .transport.base import Transport, TransferRequest

ADDRESS_SCHEME = "mpi"
_PREFIX = ADDRESS_SCHEME + "://"
_PROPOSAL = struct.Struct("<Q")       # connection id
_REPLY = struct.Struct("<QI")         # connection id, generation
_EOS_HEADER = struct.Struct("<I").pack(0xFFFFFFFF)

CONNECT_TIMEOUT_SECONDS = 5.0
CONNECT_TIMEOUT_TICKS = 10**6


@dataclass(frozen=True)
class Address:
    """Listener address, rendered as ``mpi://<decimal rank>``."""

    rank: int

    def render(self) -> str:
        return f"{_PREFIX}{self.rank}"

    def __str__(self) -> str:
        return self.render()


def parse_address(text: str) -> Address:
    for index, expected in enumerate(_PREFIX):
        if index >= len(text) or text[index] != expected:
            raise AddressParseError(
                f"address {text!r} does not start with {_PREFIX!r} (offset {index})",
                position=index,
            )
    digits = text[len(_PREFIX):]
    if not digits:
        raise AddressParseError(f"address {text!r} is missing a rank", position=len(_PREFIX))
    for offset, ch in enumerate(digits):
        if ch not in "0123456789":
            raise AddressParseError(
                f"address {text!r} has a non-digit rank character {ch!r}",
                position=len(_PREFIX) + offset,
            )
    if len(digits) > 1 and digits[0] == "0":
        raise AddressParseError(f"address {text!r} has a zero-padded rank", position=len(_PREFIX))
    return Address(int(digits))


class Node:
    """Per-rank runtime bundle the endpoint layer operates on."""

    def __init__(self, transport: Transport, table: CommTable, *, max_chunk: int | None = None):
        self.transport = transport
        self.table = table
        self.rank = transport.rank
        self.max_chunk = max_chunk
        self.listener: Listener | None = None
        self._conn_counter = itertools.count(1)

    def next_connection_id(self) -> int:
        return (self.rank << 20) | next(self._conn_counter)

    def connect_timeout_units(self):
        clock = self.transport.clock
        if getattr(clock, "virtual", False):
            return CONNECT_TIMEOUT_TICKS
        return clock.from_seconds(CONNECT_TIMEOUT_SECONDS)


class Endpoint:
    """One live connection: a duplicated channel plus lifecycle state."""

    def __init__(self, node: Node, channel: Channel, peer: int, origin: str, connection_id: int):
        assert channel.generation >= 1, "endpoints never ride base channels"
        self.node = node
        self.channel = channel
        self.peer = peer
        self.origin = origin
        self.connection_id = connection_id
        self.state = "open"
        self._reading = False
        self._writing = False
        self._peer_eos_seen = False
        self._poisoned: Exception | None = None
        self._released = False

    @property
    def local_address(self) -> Address:
        return Address(self.node.rank)

    @property
    def peer_address(self) -> Address:
        return Address(self.peer)

    def _check_open(self) -> None:
        if self.state != "open":
            raise CommClosedError(f"endpoint to rank {self.peer} is closed")
        if self._poisoned is not None:
            raise CommClosedError(
                f"endpoint to rank {self.peer} is poisoned by an earlier transfer error: "
                f"{self._poisoned}"
            )

    async def write(self, message: Message) -> None:
        """Send one whole message; messages on this endpoint are totally ordered."""
        self._check_open()
        if self._writing:
            raise UsageError("concurrent write() calls on one endpoint")
        self._writing = True
        try:
            await write_message(self.node.transport, self.channel, message,
                                max_chunk=self.node.max_chunk)
        except CommShimError as exc:
            self._poisoned = exc
            raise
        finally:
            self._writing = False

    async def read(self) -> Message:
        """Return the next message in write order; EndOfStream when the peer closed."""
        if self._peer_eos_seen:
            raise _end_of_stream(self.peer)
        self._check_open()
        if self._reading:
            raise UsageError("concurrent read() calls on one endpoint")
        self._reading = True
        try:
            return await read_message(self.node.transport, self.channel,
                                      max_chunk=self.node.max_chunk)
        except EndOfStreamReceived:
            self._peer_eos_seen = True
            raise _end_of_stream(self.peer) from None
        except CommShimError as exc:
            self._poisoned = exc
            raise
        finally:
            self._reading = False

    async def close(self) -> None:
        """Drain writes, mark the stream closed and schedule the channel release."""
        if self.state == "closed":
            return
        self.state = "closed"
        while self._writing:
            await sleep(0)
        transport = self.node.transport
        channel_id, peer = self.channel.id, self.peer
        eos_req = transport.post_send(channel_id, peer, MESSAGE_TAG, _EOS_HEADER)
        current_loop().create_task(self._reap(eos_req), name=f"reap-ch{channel_id}")

    async def _reap(self, eos_req: TransferRequest) -> None:
        transport = self.node.transport
        try:
            await await_request(transport, eos_req)
        except CancelledTransferError:
            return
        while self._reading:
            await sleep(0)
        while not self._peer_eos_seen:
            try:
                await read_message(transport, self.channel, max_chunk=self.node.max_chunk)
                # A message the application never read; drop it.
            except EndOfStreamReceived:
                self._peer_eos_seen = True
            except CommShimError:
                break  # peer stream is broken; release regardless
        if not self._released:
            self._released = True
            self.node.table.release(self.channel)

    def __repr__(self):
        return (
            f"<Endpoint ch={self.channel.id} peer={self.peer} origin={self.origin} "
            f"conn={self.connection_id} {self.state}>"
        )


def _end_of_stream(peer: int):
    from .errors import EndOfStream

    return EndOfStream(f"rank {peer} closed the connection")


class Listener:
    """Accepts handshakes on every peer's base channel and hands out endpoints."""

    def __init__(self, node: Node, address: Address | str, handler):
        if isinstance(address, str):
            address = parse_address(address)
        if address.rank != node.rank:
            raise UsageError(f"cannot listen on {address}: this is rank {node.rank}")
        self.node = node
        self.address = address
        self.handler = handler
        self.state = "created"
        self.accepted = 0
        self._accept_reqs: dict[int, TransferRequest] = {}
        self._tasks: list = []

    async def start(self) -> None:
        if self.state == "started":
            raise UsageError("listener already started")
        if self.node.listener is not None and self.node.listener.state == "started":
            raise UsageError(f"rank {self.node.rank} already has a listener")
        self.state = "started"
        self.node.listener = self
        loop = current_loop()
        for peer in range(self.node.transport.world_size):
            if peer != self.node.rank:
                self._tasks.append(
                    loop.create_task(self._accept_loop(peer), name=f"accept-{peer}")
                )

    def stop(self) -> None:
        """Refuse new handshakes; existing endpoints are untouched.  Idempotent."""
        if self.state != "started":
            return
        self.state = "stopped"
        if self.node.listener is self:
            self.node.listener = None
        for req in self._accept_reqs.values():
            if req.pending:
                self.node.transport.cancel(req)
        self._accept_reqs.clear()

    async def _accept_loop(self, peer: int) -> None:
        transport = self.node.transport
        base = self.node.table.lookup(peer)
        loop = current_loop()
        while self.state == "started":
            buf = bytearray(_PROPOSAL.size)
            req = transport.post_recv(base.id, peer, HANDSHAKE_TAG, buf)
            self._accept_reqs[peer] = req
            try:
                await await_request(transport, req)
            except CancelledTransferError:
                return  # stop() retracted the posted recv
            except CommShimError:
                return  # transport torn down
            (connection_id,) = _PROPOSAL.unpack(bytes(buf))
            channel = self.node.table.duplicate(peer)
            reply = _REPLY.pack(connection_id, channel.generation)
            reply_req = transport.post_send(base.id, peer, HANDSHAKE_TAG, reply)
            await await_request(transport, reply_req)
            endpoint = Endpoint(self.node, channel, peer, "listener", connection_id)
            self.accepted += 1
            loop.create_task(_run_handler(self.handler, endpoint), name=f"handler-{peer}")


async def _run_handler(handler, endpoint: Endpoint) -> None:
    result = handler(endpoint)
    if hasattr(result, "__await__"):
        await result


def listen(node: Node, address: Address | str, handler) -> Listener:
    """Create a listener for this rank; call ``await listener.start()`` next."""
    return Listener(node, address, handler)


async def connect(node: Node, address: Address | str, timeout=None) -> Endpoint:
    """Handshake with the listener at ``address``; returns an open endpoint.

    Raises :class:`ConnectRefused` if no reply arrives within the timeout
    (5 s wall clock, or 10^6 ticks on the simulated transport).
    """
    if isinstance(address, str):
        address = parse_address(address)
    target = address.rank
    if target == node.rank:
        raise UsageError("cannot connect to self")
    transport = node.transport
    base = node.table.lookup(target)
    connection_id = node.next_connection_id()
    if timeout is None:
        timeout = node.connect_timeout_units()

    # Post the reply recv before the proposal leaves, with no await between:
    # concurrent connects to the same target then pair replies in FIFO order.
    reply_buf = bytearray(_REPLY.size)
    reply_req = transport.post_recv(base.id, target, HANDSHAKE_TAG, reply_buf)
    proposal_req = transport.post_send(base.id, target, HANDSHAKE_TAG,
                                       _PROPOSAL.pack(connection_id))

    async def complete_handshake():
        await await_request(transport, proposal_req)
        await await_request(transport, reply_req)

    try:
        await wait_for(complete_handshake(), timeout)
    except WaitTimeout:
        transport.cancel(reply_req)
        transport.cancel(proposal_req)
        raise ConnectRefused(
            f"no listener at {address} answered within {timeout} clock units"
        ) from None
    echoed_id, generation = _REPLY.unpack(bytes(reply_buf))
    if echoed_id != connection_id:
        raise CommShimError(
            f"handshake reply for connection {echoed_id} arrived at connection {connection_id}"
        )
    channel = node.table.duplicate(target, generation=generation)
    return Endpoint(node, channel, target, "connector", connection_id)
