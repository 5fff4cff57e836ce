"""Transport layer: contract plus the simulated and socket implementations."""

from __future__ import annotations

from ..errors import ConfigurationError
from .base import (
    DEFAULT_MAX_COUNT,
    DeviceRegion,
    LinkModel,
    MAX_TAG,
    MemoryDomain,
    RESERVED_TAG_LIMIT,
    Transport,
    TransportConfig,
    TransportMetrics,
    TransferRequest,
    WORLD_CHANNEL,
    as_view,
)
from .sim import SimFabric, SimTransport

__all__ = [
    "DEFAULT_MAX_COUNT",
    "DeviceRegion",
    "LinkModel",
    "MAX_TAG",
    "MemoryDomain",
    "RESERVED_TAG_LIMIT",
    "SimFabric",
    "SimTransport",
    "SocketTransport",
    "Transport",
    "TransportConfig",
    "TransportMetrics",
    "TransferRequest",
    "WORLD_CHANNEL",
    "as_view",
    "transport_init",
]


def transport_init(world_size: int, self_rank: int, config: TransportConfig) -> Transport:
    """Bring up the transport for one rank and return its handle.

    Simulated worlds share a :class:`SimFabric` passed in ``config.fabric``
    (a private single-rank fabric is created when omitted).  Socket worlds
    need ``config.rank_map`` with one ``(host, port)`` per rank.
    """
    if config.kind == "sim":
        fabric = config.fabric
        if fabric is None:
            fabric = SimFabric(
                world_size,
                link=config.link,
                max_count=config.max_count,
                device_aware=config.device_aware,
            )
        if fabric.world_size != world_size:
            raise ConfigurationError(
                f"fabric world size {fabric.world_size} != requested {world_size}"
            )
        return fabric.transport(self_rank)
    if config.kind == "socket":
        from .tcp import SocketTransport

        if config.rank_map is None:
            raise ConfigurationError("socket transport requires a rank -> (host, port) map")
        return SocketTransport(
            world_size,
            self_rank,
            config.rank_map,
            max_count=config.max_count,
            device_aware=config.device_aware,
            connect_timeout=config.connect_timeout,
        )
    raise ConfigurationError(f"unknown transport kind {config.kind!r}")


def __getattr__(name: str):
    if name == "SocketTransport":
        from .tcp import SocketTransport

        return SocketTransport
    raise AttributeError(name)
