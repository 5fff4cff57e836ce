"""Pairwise channel table with duplication and a bounded reuse cache.

At startup every rank builds the same table: one base channel per unordered
rank pair, with ids assigned by a closed-form function of the pair so that
all ranks agree without any negotiation.  Dynamic connections never ride the
base channels; they get *duplicates* whose generation numbers are unique per
pair.  Released duplicates park in a bounded per-peer cache so a later
connection can reuse the id instead of minting a new one.

Generation parity is split by which side allocates (the low rank of the pair
hands out odd generations, the high rank even ones), so simultaneous
connection setups from both ends can never collide on an id.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field

from .errors import BusyError, UsageError
from .transport.base import Transport, WORLD_CHANNEL

DEFAULT_DUP_CACHE = 16
DUP_CACHE_ENV = "COMMSHIM_DUP_CACHE"
_GENERATION_SPAN = 1 << 16


def pair_of(a: int, b: int) -> tuple[int, int]:
    if a == b:
        raise UsageError("a channel pair needs two distinct ranks")
    return (a, b) if a < b else (b, a)


def base_channel_id(world_size: int, i: int, j: int) -> int:
    """Base id for pair {i, j}: 1 + its index in lexicographic pair order."""
    i, j = pair_of(i, j)
    if j >= world_size:
        raise UsageError(f"rank {j} outside world of size {world_size}")
    preceding = i * world_size - (i * (i + 1)) // 2
    return 1 + preceding + (j - i - 1)


def duplicate_channel_id(base_id: int, generation: int) -> int:
    if not 1 <= generation < _GENERATION_SPAN:
        raise UsageError(f"generation {generation} outside [1, {_GENERATION_SPAN})")
    return (base_id << 16) | generation


@dataclass(frozen=True)
class Channel:
    """An isolated bidirectional pipe between two ranks.

    ``generation`` 0 marks a base table entry; duplicates are >= 1.
    """

    id: int
    pair: tuple[int, int]
    generation: int

    def __post_init__(self):
        low, high = self.pair
        if low >= high:
            raise UsageError("channel pair must be ordered low < high")

    def peer_of(self, rank: int) -> int:
        low, high = self.pair
        if rank == low:
            return high
        if rank == high:
            return low
        raise UsageError(f"rank {rank} is not an endpoint of pair {self.pair}")


@dataclass
class _PairState:
    next_gen: int  # next locally-allocated generation (strides by 2)
    cache: deque[Channel] = field(default_factory=deque)
    hits: int = 0


class CommTable:
    """Per-rank map from peer to base channel, plus the duplicate machinery."""

    def __init__(self, transport: Transport, cache_capacity: int | None = None):
        if cache_capacity is None:
            cache_capacity = int(os.environ.get(DUP_CACHE_ENV, DEFAULT_DUP_CACHE))
        if cache_capacity < 0:
            raise UsageError("cache_capacity must be >= 0")
        self.transport = transport
        self.rank = transport.rank
        self.world_size = transport.world_size
        self.cache_capacity = cache_capacity
        self.base: dict[int, Channel] = {}
        self._pairs: dict[int, _PairState] = {}

    # -- base table ----------------------------------------------------------

    def _pair_state(self, peer: int) -> _PairState:
        state = self._pairs.get(peer)
        if state is None:
            # Low rank of the pair allocates odd generations, high rank even.
            first = 1 if self.rank < peer else 2
            state = _PairState(next_gen=first)
            self._pairs[peer] = state
        return state

    def lookup(self, peer: int) -> Channel:
        if peer == self.rank:
            raise UsageError("no channel to self")
        if not 0 <= peer < self.world_size:
            raise UsageError(f"peer {peer} outside world of size {self.world_size}")
        return self.base[peer]

    # -- duplication ---------------------------------------------------------

    def allocate_generation(self, peer: int) -> int:
        """Reserve the generation the next duplicate of this pair will use.

        Prefers a cached released duplicate that this side once allocated, so
        the eventual :meth:`duplicate` call is a cache hit at both ends.
        """
        state = self._pair_state(peer)
        own_parity = 1 if self.rank < peer else 0
        for cached in state.cache:
            if cached.generation % 2 == own_parity:
                return cached.generation
        gen = state.next_gen
        return gen

    def duplicate(self, peer: int, generation: int | None = None) -> Channel:
        """Create (or revive from cache) a duplicate channel for the pair.

        With ``generation=None`` this side allocates one from its own parity
        space; connection setup instead passes the handshake-agreed value so
        both ends register the identical id.
        """
        if peer == self.rank:
            raise UsageError("cannot duplicate a channel to self")
        if not 0 <= peer < self.world_size:
            raise UsageError(f"peer {peer} outside world of size {self.world_size}")
        state = self._pair_state(peer)
        if generation is None:
            generation = self.allocate_generation(peer)
        for cached in state.cache:
            if cached.generation == generation:
                state.cache.remove(cached)
                state.hits += 1
                self.transport.purge_channel(cached.id)
                self.transport.register_channel(cached.id, peer)
                return cached
        base = self.base[peer]
        channel = Channel(
            id=duplicate_channel_id(base.id, generation),
            pair=pair_of(self.rank, peer),
            generation=generation,
        )
        if generation >= state.next_gen and generation % 2 == state.next_gen % 2:
            state.next_gen = generation + 2
        self.transport.register_channel(channel.id, peer)
        return channel

    def release(self, channel: Channel) -> None:
        """Return a duplicate to the cache (or destroy it when the cache is full)."""
        if channel.generation == 0:
            raise UsageError("base channels are never released")
        if self.transport.has_pending(channel.id):
            raise BusyError(f"channel {channel.id} still has pending transfers")
        peer = channel.peer_of(self.rank)
        self.transport.deregister_channel(channel.id)
        state = self._pair_state(peer)
        if len(state.cache) < self.cache_capacity:
            state.cache.append(channel)
        # else: destroyed; the id stays deregistered and later traffic fails.

    def cache_hits(self, peer: int) -> int:
        return self._pairs[peer].hits if peer in self._pairs else 0

    def cached_count(self, peer: int) -> int:
        return len(self._pairs[peer].cache) if peer in self._pairs else 0


def build_comm_table(transport: Transport, cache_capacity: int | None = None) -> CommTable:
    """Build this rank's full pairwise table; all ranks call this at startup.

    Ids come from :func:`base_channel_id`, so the tables agree globally
    without exchanging anything.  The double loop visits every unordered pair
    once, which is n(n-1)/2 channels world-wide.
    """
    table = CommTable(transport, cache_capacity)
    size = transport.world_size
    rank = transport.rank
    for i in range(size):
        for j in range(i + 1, size):
            channel_id = base_channel_id(size, i, j)
            if rank == i:
                channel = Channel(id=channel_id, pair=(i, j), generation=0)
                table.base[j] = channel
                transport.register_channel(channel_id, j)
            elif rank == j:
                channel = Channel(id=channel_id, pair=(i, j), generation=0)
                table.base[i] = channel
                transport.register_channel(channel_id, i)
    assert len(table.base) == (size - 1 if size > 1 else 0)
    assert WORLD_CHANNEL not in {c.id for c in table.base.values()}
    return table
