import socket as socketlib
import time

import pytest

from commshim.errors import (
    CommClosedError,
    ConfigurationError,
    StartupError,
    TruncationError,
)
from commshim.transport import DeviceRegion, MemoryDomain
from commshim.transport.tcp import (
    FRAME_HEADER,
    SocketTransport,
    load_hostfile,
    pack_frame_header,
    write_hostfile,
)


def free_port():
    with socketlib.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def make_rank_map(n):
    return {r: ("127.0.0.1", free_port()) for r in range(n)}


@pytest.fixture
def pair():
    rank_map = make_rank_map(2)
    t0 = SocketTransport(2, 0, rank_map, connect_timeout=5.0)
    t1 = SocketTransport(2, 1, rank_map, connect_timeout=5.0)
    pump(t0, t1, until=lambda: t0.mesh_ready and t1.mesh_ready)
    yield t0, t1
    t0.close()
    t1.close()


def pump(*transports, until, max_iter=20_000):
    for _ in range(max_iter):
        if until():
            return
        for t in transports:
            t.progress()
        time.sleep(0.0005)
    raise AssertionError("condition not reached while pumping transports")


def test_mesh_forms_in_process(pair):
    t0, t1 = pair
    assert t0.mesh_ready and t1.mesh_ready


def test_roundtrip_identity(pair):
    t0, t1 = pair
    payload = bytes(range(256)) * 37
    send = t0.post_send(0, 1, 100, payload)
    buf = bytearray(len(payload))
    recv = t1.post_recv(0, 0, 100, buf)
    pump(t0, t1, until=lambda: not send.pending and not recv.pending)
    assert bytes(buf) == payload
    assert send.bytes_moved == recv.bytes_moved == len(payload)


def test_send_buffered_until_recv_posted(pair):
    t0, t1 = pair
    send = t0.post_send(0, 1, 5, b"early")
    pump(t0, t1, until=lambda: not send.pending)
    buf = bytearray(5)
    recv = t1.post_recv(0, 0, 5, buf)
    pump(t0, t1, until=lambda: not recv.pending)
    assert bytes(buf) == b"early"


def test_fifo_order_on_one_key(pair):
    t0, t1 = pair
    t0.post_send(0, 1, 9, b"one..")
    t0.post_send(0, 1, 9, b"two..")
    a, b = bytearray(5), bytearray(5)
    ra = t1.post_recv(0, 0, 9, a)
    rb = t1.post_recv(0, 0, 9, b)
    pump(t0, t1, until=lambda: not ra.pending and not rb.pending)
    assert bytes(a) == b"one.."
    assert bytes(b) == b"two.."


def test_truncation_fails_recv(pair):
    t0, t1 = pair
    t0.post_send(0, 1, 6, b"eightbyt")
    recv = t1.post_recv(0, 0, 6, bytearray(4))
    pump(t0, t1, until=lambda: not recv.pending)
    assert recv.failed
    assert isinstance(recv.error, TruncationError)


def test_device_domain_staging_metrics(pair):
    t0, t1 = pair
    data = b"\x55" * 512
    send = t0.post_send(0, 1, 7, DeviceRegion(data), domain=MemoryDomain.DEVICE_SIM)
    sink = DeviceRegion(512)
    recv = t1.post_recv(0, 0, 7, sink, domain=MemoryDomain.DEVICE_SIM)
    pump(t0, t1, until=lambda: not send.pending and not recv.pending)
    assert t0.metrics.staged_bytes == 512
    assert t1.metrics.staged_bytes == 512
    assert sink.to_bytes() == data


def test_cancel_posted_recv(pair):
    t0, t1 = pair
    recv = t1.post_recv(0, 0, 11, bytearray(4))
    assert t1.cancel(recv)
    assert recv.failed
    send = t0.post_send(0, 1, 11, b"next")
    buf = bytearray(4)
    recv2 = t1.post_recv(0, 0, 11, buf)
    pump(t0, t1, until=lambda: not send.pending and not recv2.pending)
    assert bytes(buf) == b"next"


def test_peer_close_fails_pending_recvs(pair):
    t0, t1 = pair
    recv = t1.post_recv(0, 0, 12, bytearray(4))
    t0.close()
    pump(t1, until=lambda: not recv.pending)
    assert recv.failed
    late = t1.post_recv(0, 0, 12, bytearray(4))
    assert late.failed
    assert isinstance(late.error, CommClosedError)


def test_rank_collision_on_bind():
    rank_map = make_rank_map(2)
    t0 = SocketTransport(2, 0, rank_map)
    try:
        with pytest.raises(ConfigurationError):
            SocketTransport(2, 0, rank_map)
    finally:
        t0.close()


def test_unreachable_peer_named_in_startup_error():
    rank_map = make_rank_map(2)
    t1 = SocketTransport(2, 1, rank_map, connect_timeout=0.3)
    try:
        with pytest.raises(StartupError) as info:
            t1.wait_ready(timeout=0.3)
        assert info.value.rank == 0
    finally:
        t1.close()


def test_wire_frame_golden_bytes():
    header = pack_frame_header(channel=3, tag=100, domain=1, length=5)
    assert FRAME_HEADER.size == 22
    expected = bytes([
        0x31, 0x44, 0x34, 0x4D,  # magic 0x4D344431 little-endian
        0x01,                    # version
        0x03, 0x00, 0x00, 0x00,  # channel id
        0x64, 0x00, 0x00, 0x00,  # tag
        0x01,                    # memory domain
        0x05, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,  # length
    ])
    assert header == expected


def test_hostfile_roundtrip(tmp_path):
    path = tmp_path / "hosts.txt"
    rank_map = {0: ("127.0.0.1", 4401), 1: ("10.0.0.2", 4402)}
    write_hostfile(str(path), rank_map)
    assert load_hostfile(str(path)) == rank_map


def test_hostfile_rejects_malformed_lines(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 localhost\n")
    with pytest.raises(ConfigurationError):
        load_hostfile(str(path))
