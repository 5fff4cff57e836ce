"""Awaitable send/recv coroutines, chunked framing and progress modes.

The awaiting pattern is the cooperative one: each poll of a pending request
calls the transport's ``test()`` (which drives progress) and then yields to
the executor, so communication advances whenever any communication coroutine
runs and a busy wait can never starve the peer.  The alternative *periodic*
mode parks awaiters on completion futures and lets one recurring task drive
progress on a fixed interval; it exists so the two designs can be compared
under identical traffic.

Payloads larger than ``max_chunk`` are split into bounded slices that are
posted and awaited one after another.  Sliceable host buffers are cut with
ordinary subscripting; opaque device regions are walked by advancing an
offset into an explicit window.  Both produce identical wire bytes.

Wire layout (inside transport frame payloads, all little-endian):

* per-transfer header (``send_payload``): u64 length, u8 serializer tag,
  u8 memory domain;
* message header (``write``): u32 frame count, then per frame u64 length,
  u8 serializer tag, u8 domain.  Frame count 0xFFFFFFFF is the end-of-stream
  marker.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .channels import Channel
from .errors import ProtocolError, TransferError, UsageError
from .loop import current_loop, sleep
from .transport.base import DeviceRegion, MemoryDomain, Transport, TransferRequest, as_view

MESSAGE_TAG = 1       # message headers and the end-of-stream marker
HANDSHAKE_TAG = 2     # endpoint connection setup (used by endpoints module)
DATA_TAG_BASE = 16    # first tag available for frame payload streams
_DATA_TAG_SPAN = 2**15

DEFAULT_MAX_CHUNK = 2**30  # mirrors the 1 GB chunking of the large-message path
MAX_CHUNK_ENV = "COMMSHIM_MAX_CHUNK"
MAX_FRAMES_PER_MESSAGE = 1024

_TRANSFER_HEADER = struct.Struct("<QBB")
_COUNT = struct.Struct("<I")
_FRAME_META = struct.Struct("<QBB")
_EOS_SENTINEL = 0xFFFFFFFF


def default_max_chunk() -> int:
    return int(os.environ.get(MAX_CHUNK_ENV, DEFAULT_MAX_CHUNK))


# -- serializer registry -----------------------------------------------------

def _encode_raw(obj) -> bytes:
    return bytes(as_view(obj))


def _decode_raw(data: bytes):
    return data


def _encode_utf8(obj) -> bytes:
    raw = str(obj).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _decode_utf8(data: bytes) -> str:
    if len(data) < 4:
        raise ProtocolError("utf-8 frame shorter than its length prefix", expected=4, actual=len(data))
    (length,) = struct.unpack_from("<I", data)
    if length != len(data) - 4:
        raise ProtocolError("utf-8 frame length prefix mismatch", expected=length, actual=len(data) - 4)
    return data[4:].decode("utf-8")


def _encode_f64(obj) -> bytes:
    return np.asarray(obj, dtype="<f8").tobytes()


def _decode_f64(data: bytes) -> np.ndarray:
    return np.frombuffer(bytes(data), dtype="<f8")


SERIALIZERS: dict[int, tuple] = {
    0: (_encode_raw, _decode_raw),
    1: (_encode_utf8, _decode_utf8),
    2: (_encode_f64, _decode_f64),
}


def register_serializer(tag: int, encode, decode) -> None:
    if not 0 <= tag < 256:
        raise UsageError("serializer tags are a single byte")
    SERIALIZERS[tag] = (encode, decode)


# -- frames and messages -----------------------------------------------------

@dataclass
class Frame:
    """One contiguous payload region plus how to interpret it."""

    data: object  # bytes-like or DeviceRegion
    length: int
    domain: MemoryDomain = MemoryDomain.HOST
    serializer_tag: int = 0

    def __post_init__(self):
        actual = self.data.nbytes if isinstance(self.data, DeviceRegion) else len(as_view(self.data))
        if actual != self.length:
            raise UsageError(f"frame length {self.length} != region extent {actual}")

    def window(self, offset: int, length: int) -> memoryview:
        """Chunk access: offset walk for device regions, slicing otherwise."""
        if isinstance(self.data, DeviceRegion):
            return self.data.window(offset, length)
        return as_view(self.data)[offset : offset + length]

    def to_bytes(self) -> bytes:
        return self.data.to_bytes() if isinstance(self.data, DeviceRegion) else bytes(as_view(self.data))

    def decode(self):
        try:
            decode = SERIALIZERS[self.serializer_tag][1]
        except KeyError:
            raise UsageError(f"no deserializer registered for tag {self.serializer_tag}") from None
        return decode(self.to_bytes())


def make_frame(obj, serializer_tag: int = 0, domain: MemoryDomain = MemoryDomain.HOST) -> Frame:
    try:
        encode = SERIALIZERS[serializer_tag][0]
    except KeyError:
        raise UsageError(f"no serializer registered for tag {serializer_tag}") from None
    raw = encode(obj)
    if domain == MemoryDomain.DEVICE_SIM:
        return Frame(DeviceRegion(raw), len(raw), domain, serializer_tag)
    return Frame(raw, len(raw), domain, serializer_tag)


@dataclass
class Message:
    """Ordered list of frames; the unit the endpoint API reads and writes."""

    frames: list[Frame] = field(default_factory=list)

    def header(self) -> list[tuple[int, int, int]]:
        return [(f.length, f.serializer_tag, int(f.domain)) for f in self.frames]

    def decode(self) -> list:
        return [f.decode() for f in self.frames]


def allocate_frame_buffer(length: int, domain: MemoryDomain):
    if domain == MemoryDomain.DEVICE_SIM:
        return DeviceRegion(length)
    return bytearray(length)


# -- chunk planning ------------------------------------------------------------

@dataclass(frozen=True)
class ChunkPlan:
    total: int
    max_chunk: int
    slices: tuple[tuple[int, int], ...]


def chunk_plan(total: int, max_chunk: int) -> ChunkPlan:
    """Deterministic split of ``total`` bytes into contiguous <= max_chunk slices."""
    if max_chunk < 1:
        raise UsageError("max_chunk must be at least 1")
    if total < 0:
        raise UsageError("total must be non-negative")
    slices = []
    offset = 0
    while offset < total:
        length = min(max_chunk, total - offset)
        slices.append((offset, length))
        offset += length
    return ChunkPlan(total, max_chunk, tuple(slices))


# -- progress modes ------------------------------------------------------------

@dataclass(frozen=True)
class ProgressMode:
    kind: str            # "cooperative" | "periodic"
    interval: float = 0.0  # seconds between progress calls in periodic mode

    @staticmethod
    def cooperative() -> "ProgressMode":
        return ProgressMode("cooperative")

    @staticmethod
    def periodic(interval: float) -> "ProgressMode":
        if interval <= 0:
            raise UsageError("periodic interval must be positive")
        return ProgressMode("periodic", interval)


COOPERATIVE = ProgressMode.cooperative()


def progress_mode(transport: Transport) -> ProgressMode:
    return getattr(transport, "_progress_mode", COOPERATIVE)


def set_progress_mode(transport: Transport, mode: ProgressMode | str) -> None:
    """Switch how pending transfers are driven; only legal while quiescent."""
    if isinstance(mode, str):
        mode = ProgressMode(mode)
        if mode.kind == "periodic":
            raise UsageError("periodic mode needs an interval; use ProgressMode.periodic()")
    if mode.kind not in ("cooperative", "periodic"):
        raise UsageError(f"unknown progress mode {mode.kind!r}")
    if transport.has_pending():
        raise UsageError("cannot switch progress mode with transfers pending")
    old_task = getattr(transport, "_progress_task", None)
    if old_task is not None and not old_task.done():
        old_task.cancel()
    transport._progress_mode = mode
    transport._progress_task = None
    if mode.kind == "periodic":
        loop = current_loop()
        interval = loop.clock.from_seconds(mode.interval)

        async def pump():
            while progress_mode(transport) is mode:
                await sleep(interval)
                transport.progress()

        transport._progress_task = loop.create_task(pump(), name="progress-pump")


# -- awaiting ------------------------------------------------------------------

async def await_request(transport: Transport, request: TransferRequest) -> TransferRequest:
    """Suspend until the request leaves pending; raise its error if it failed."""
    if progress_mode(transport).kind == "cooperative":
        status = transport.test(request)
        while status is False:
            await sleep(0)
            status = transport.test(request)
    else:
        while request.pending:
            fut = current_loop().create_future()
            request.add_waiter(fut)
            await fut
    if request.failed:
        raise request.error
    return request


def _route(transport: Transport, channel: Channel) -> tuple[int, int]:
    return channel.id, channel.peer_of(transport.rank)


def _effective_chunk(transport: Transport, max_chunk: int | None) -> int:
    if max_chunk is None:
        max_chunk = default_max_chunk()
    return max(1, min(max_chunk, transport.max_count))


async def _send_chunks(transport: Transport, channel_id: int, peer: int, tag: int,
                       frame: Frame, max_chunk: int) -> None:
    for offset, length in chunk_plan(frame.length, max_chunk).slices:
        req = transport.post_send(channel_id, peer, tag, frame.window(offset, length), frame.domain)
        await await_request(transport, req)


async def _recv_chunks(transport: Transport, channel_id: int, peer: int, tag: int,
                       length: int, domain: MemoryDomain, max_chunk: int):
    buffer = allocate_frame_buffer(length, domain)
    for offset, chunk_len in chunk_plan(length, max_chunk).slices:
        window = buffer.window(offset, chunk_len) if isinstance(buffer, DeviceRegion) \
            else memoryview(buffer)[offset : offset + chunk_len]
        req = transport.post_recv(channel_id, peer, tag, window, domain)
        await await_request(transport, req)
        if req.bytes_moved != chunk_len:
            raise ProtocolError(
                f"chunk at offset {offset} delivered {req.bytes_moved} bytes, "
                f"header announced {chunk_len}",
                expected=chunk_len,
                actual=req.bytes_moved,
            )
    return buffer


async def send_payload(transport: Transport, channel: Channel, tag: int, frame: Frame,
                       max_chunk: int | None = None) -> None:
    """Deliver one frame: a small self-describing header, then its chunks."""
    channel_id, peer = _route(transport, channel)
    max_chunk = _effective_chunk(transport, max_chunk)
    header = _TRANSFER_HEADER.pack(frame.length, frame.serializer_tag, int(frame.domain))
    req = transport.post_send(channel_id, peer, tag, header)
    await await_request(transport, req)
    await _send_chunks(transport, channel_id, peer, tag, frame, max_chunk)


async def recv_payload(transport: Transport, channel: Channel, tag: int,
                       max_chunk: int | None = None) -> Frame:
    """Receive one frame, allocating from the domain its header announces."""
    channel_id, peer = _route(transport, channel)
    max_chunk = _effective_chunk(transport, max_chunk)
    header_buf = bytearray(_TRANSFER_HEADER.size)
    req = transport.post_recv(channel_id, peer, tag, header_buf)
    await await_request(transport, req)
    if req.bytes_moved != _TRANSFER_HEADER.size:
        raise ProtocolError("short transfer header",
                            expected=_TRANSFER_HEADER.size, actual=req.bytes_moved)
    length, serializer_tag, domain_raw = _TRANSFER_HEADER.unpack(bytes(header_buf))
    domain = MemoryDomain(domain_raw)
    buffer = await _recv_chunks(transport, channel_id, peer, tag, length, domain, max_chunk)
    return Frame(buffer, length, domain, serializer_tag)


# -- whole messages ------------------------------------------------------------

def data_tag(frame_index: int) -> int:
    return DATA_TAG_BASE + (frame_index % _DATA_TAG_SPAN)


def _pack_message_header(message: Message) -> bytes:
    parts = [_COUNT.pack(len(message.frames))]
    for length, ser, domain in message.header():
        parts.append(_FRAME_META.pack(length, ser, domain))
    return b"".join(parts)


async def write_message(transport: Transport, channel: Channel, message: Message,
                        max_chunk: int | None = None) -> None:
    """Send the header on the control tag, then each frame on its data tag."""
    if len(message.frames) > MAX_FRAMES_PER_MESSAGE:
        raise UsageError(f"messages are limited to {MAX_FRAMES_PER_MESSAGE} frames")
    channel_id, peer = _route(transport, channel)
    max_chunk = _effective_chunk(transport, max_chunk)
    req = transport.post_send(channel_id, peer, MESSAGE_TAG, _pack_message_header(message))
    await await_request(transport, req)
    for index, frame in enumerate(message.frames):
        await _send_chunks(transport, channel_id, peer, data_tag(index), frame, max_chunk)


async def write_end_of_stream(transport: Transport, channel: Channel) -> None:
    channel_id, peer = _route(transport, channel)
    req = transport.post_send(channel_id, peer, MESSAGE_TAG, _COUNT.pack(_EOS_SENTINEL))
    await await_request(transport, req)


class EndOfStreamReceived(Exception):
    """Internal signal: the peer sent the end-of-stream marker."""


async def read_message(transport: Transport, channel: Channel,
                       max_chunk: int | None = None) -> Message:
    """Receive the next message in write order; raises EndOfStreamReceived."""
    channel_id, peer = _route(transport, channel)
    max_chunk = _effective_chunk(transport, max_chunk)
    header_buf = bytearray(_COUNT.size + MAX_FRAMES_PER_MESSAGE * _FRAME_META.size)
    req = transport.post_recv(channel_id, peer, MESSAGE_TAG, header_buf)
    await await_request(transport, req)
    if req.bytes_moved < _COUNT.size:
        raise ProtocolError("message header shorter than its frame count",
                            expected=_COUNT.size, actual=req.bytes_moved)
    (count,) = _COUNT.unpack_from(header_buf)
    if count == _EOS_SENTINEL:
        raise EndOfStreamReceived
    if count > MAX_FRAMES_PER_MESSAGE:
        raise ProtocolError(f"frame count {count} exceeds the {MAX_FRAMES_PER_MESSAGE} limit",
                            expected=MAX_FRAMES_PER_MESSAGE, actual=count)
    expected_len = _COUNT.size + count * _FRAME_META.size
    if req.bytes_moved != expected_len:
        raise ProtocolError("message header length disagrees with its frame count",
                            expected=expected_len, actual=req.bytes_moved)
    metas = []
    for index in range(count):
        length, ser, domain_raw = _FRAME_META.unpack_from(header_buf, _COUNT.size + index * _FRAME_META.size)
        metas.append((length, ser, MemoryDomain(domain_raw)))
    frames = []
    for index, (length, ser, domain) in enumerate(metas):
        buffer = await _recv_chunks(transport, channel_id, peer, data_tag(index), length, domain, max_chunk)
        frames.append(Frame(buffer, length, domain, ser))
    return Message(frames)
