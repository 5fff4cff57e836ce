import math
import random

import numpy as np
import pytest

from commshim.errors import ProtocolError, TruncationError, UsageError
from commshim.loop import TaskLoop, gather, sleep
from commshim.messaging import (
    MESSAGE_TAG,
    EndOfStreamReceived,
    Frame,
    Message,
    ProgressMode,
    await_request,
    chunk_plan,
    make_frame,
    read_message,
    recv_payload,
    send_payload,
    set_progress_mode,
    write_end_of_stream,
    write_message,
)
from commshim.transport import DeviceRegion, LinkModel, MemoryDomain

from conftest import sim_world


# -- chunk planning -----------------------------------------------------------

def test_chunk_plan_empty_total():
    assert chunk_plan(0, 1024).slices == ()


def test_chunk_plan_matches_large_message_arithmetic():
    gib = 1_073_741_824
    plan = chunk_plan(3_500_000_000, gib)
    assert len(plan.slices) == 4
    assert [length for _, length in plan.slices] == [gib, gib, gib, 278_774_528]
    # Independent re-accumulation.
    total = 0
    for offset, length in plan.slices:
        assert offset == total
        total += length
    assert total == 3_500_000_000


def test_chunk_plan_exact_boundary_is_one_slice():
    gib = 1_073_741_824
    assert chunk_plan(gib, gib).slices == ((0, gib),)


def test_chunk_plan_rejects_zero_max_chunk():
    with pytest.raises(UsageError):
        chunk_plan(10, 0)


def test_chunk_plan_invariants_randomized():
    rng = random.Random(20260809)
    for _ in range(10_000):
        total = rng.randrange(0, 1 << 40)
        max_chunk = rng.randrange(1, 1 << 32)
        plan = chunk_plan(total, max_chunk)
        assert len(plan.slices) == (math.ceil(total / max_chunk) if total else 0)
        expected_offset = 0
        for offset, length in plan.slices:
            assert offset == expected_offset
            assert 1 <= length <= max_chunk
            expected_offset += length
        assert expected_offset == total


# -- awaiting -----------------------------------------------------------------

def test_await_request_returns_completed_without_extra_polls():
    loop, fabric, (t0, t1), _tables = sim_world(2)

    async def main():
        req = t0.post_send(0, 1, 100, b"hi")
        t1.post_recv(0, 0, 100, bytearray(2))
        while req.pending:
            fabric.progress()
        before = loop.rounds
        await await_request(t0, req)
        assert loop.rounds - before <= 1

    loop.run_until_complete(main())


def test_symmetric_exchange_completes_without_deadlock():
    loop, _fabric, (t0, t1), tables = sim_world(2)
    ch0, ch1 = tables[0].lookup(1), tables[1].lookup(0)

    async def side(transport, channel, payload):
        _, frame = await gather(
            send_payload(transport, channel, 40, make_frame(payload)),
            recv_payload(transport, channel, 40),
        )
        return frame.to_bytes()

    async def main():
        return await gather(side(t0, ch0, b"from-zero"), side(t1, ch1, b"from-one!"))

    got0, got1 = loop.run_until_complete(main(), max_rounds=10_000)
    assert got0 == b"from-one!"
    assert got1 == b"from-zero"


def test_failed_transfer_error_reaches_awaiter():
    loop, _fabric, (t0, t1), _tables = sim_world(2)

    async def main():
        req = t1.post_recv(0, 0, 9, bytearray(4))
        t0.post_send(0, 1, 9, b"too-long")
        with pytest.raises(TruncationError):
            await await_request(t1, req)

    loop.run_until_complete(main())


# -- payload send/recv ---------------------------------------------------------

def test_chunked_roundtrip_posts_expected_slices():
    loop, _fabric, (t0, t1), tables = sim_world(2)
    ch0, ch1 = tables[0].lookup(1), tables[1].lookup(0)

    async def main():
        _, frame = await gather(
            send_payload(t0, ch0, 40, make_frame(b"0123456789"), max_chunk=4),
            recv_payload(t1, ch1, 40, max_chunk=4),
        )
        return frame

    frame = loop.run_until_complete(main())
    assert frame.to_bytes() == b"0123456789"
    # header + three chunks of 4, 4, 2
    assert t0.metrics.sends_completed == 4


def test_empty_frame_is_header_only():
    loop, _fabric, (t0, t1), tables = sim_world(2)
    ch0, ch1 = tables[0].lookup(1), tables[1].lookup(0)

    async def main():
        _, frame = await gather(
            send_payload(t0, ch0, 41, make_frame(b"")),
            recv_payload(t1, ch1, 41),
        )
        return frame

    frame = loop.run_until_complete(main())
    assert frame.length == 0
    assert frame.to_bytes() == b""
    assert t0.metrics.sends_completed == 1  # just the transfer header


@pytest.mark.parametrize("device_aware,expect_staged", [(False, True), (True, False)])
def test_device_frame_staging_depends_on_capability(device_aware, expect_staged):
    loop, _fabric, (t0, t1), tables = sim_world(2, device_aware=device_aware)
    ch0, ch1 = tables[0].lookup(1), tables[1].lookup(0)
    payload = bytes(range(256)) * 4

    async def main():
        _, frame = await gather(
            send_payload(t0, ch0, 42, make_frame(payload, domain=MemoryDomain.DEVICE_SIM)),
            recv_payload(t1, ch1, 42),
        )
        return frame

    frame = loop.run_until_complete(main())
    assert frame.domain == MemoryDomain.DEVICE_SIM
    assert isinstance(frame.data, DeviceRegion)
    assert frame.to_bytes() == payload
    if expect_staged:
        assert t0.metrics.staged_bytes == len(payload)
        assert t1.metrics.staged_bytes == len(payload)  # device allocation on arrival
    else:
        assert t0.metrics.staged_bytes == 0
        assert t1.metrics.staged_bytes == 0


def test_offset_and_slice_paths_produce_identical_bytes():
    payload = bytes(range(256)) * 3
    host = Frame(payload, len(payload))
    device = Frame(DeviceRegion(payload), len(payload), MemoryDomain.DEVICE_SIM)
    for offset, length in chunk_plan(len(payload), 100).slices:
        assert bytes(host.window(offset, length)) == bytes(device.window(offset, length))


# -- whole messages --------------------------------------------------------------

def run_message_roundtrip(messages, max_chunk=None, mode=None, device_aware=False):
    loop, _fabric, (t0, t1), tables = sim_world(2, device_aware=device_aware)
    ch0, ch1 = tables[0].lookup(1), tables[1].lookup(0)
    received = []

    async def main():
        if mode is not None:
            set_progress_mode(t0, mode)
            set_progress_mode(t1, mode)

        async def writer():
            for m in messages:
                await write_message(t0, ch0, m, max_chunk=max_chunk)

        async def reader():
            for _ in messages:
                received.append(await read_message(t1, ch1, max_chunk=max_chunk))

        await gather(writer(), reader())
        set_progress_mode(t0, ProgressMode.cooperative())
        set_progress_mode(t1, ProgressMode.cooperative())

    loop.run_until_complete(main(), max_rounds=2_000_000)
    return received


def test_message_structure_preserved():
    msg = Message([make_frame(b"abc"), make_frame(b"fghij")])
    (got,) = run_message_roundtrip([msg])
    assert [f.length for f in got.frames] == [3, 5]
    assert [f.to_bytes() for f in got.frames] == [b"abc", b"fghij"]


def test_zero_frame_message_is_legal():
    (got,) = run_message_roundtrip([Message([])])
    assert got.frames == []


def test_frame_larger_than_max_chunk_is_transparent():
    payload = bytes(range(256)) * 64  # 16 KiB
    (got,) = run_message_roundtrip([Message([make_frame(payload)])], max_chunk=1000)
    assert len(got.frames) == 1
    assert got.frames[0].to_bytes() == payload


def test_messages_arrive_in_write_order():
    msgs = [Message([make_frame(bytes([i]) * (i + 1))]) for i in range(5)]
    got = run_message_roundtrip(msgs)
    assert [m.frames[0].to_bytes() for m in got] == [bytes([i]) * (i + 1) for i in range(5)]


def test_serializer_tags_survive_roundtrip():
    msg = Message([
        make_frame(b"\x00\x01", 0),
        make_frame("héllo", 1),
        make_frame([1.5, -2.25, 3.0], 2),
    ])
    (got,) = run_message_roundtrip([msg])
    decoded = got.decode()
    assert decoded[0] == b"\x00\x01"
    assert decoded[1] == "héllo"
    assert np.array_equal(decoded[2], np.array([1.5, -2.25, 3.0]))


def test_end_of_stream_signal():
    loop, _fabric, (t0, t1), tables = sim_world(2)
    ch0, ch1 = tables[0].lookup(1), tables[1].lookup(0)

    async def main():
        async def writer():
            await write_message(t0, ch0, Message([make_frame(b"last")]))
            await write_end_of_stream(t0, ch0)

        async def reader():
            first = await read_message(t1, ch1)
            assert first.frames[0].to_bytes() == b"last"
            with pytest.raises(EndOfStreamReceived):
                await read_message(t1, ch1)

        await gather(writer(), reader())

    loop.run_until_complete(main())


def test_corrupt_header_raises_protocol_error_naming_counts():
    loop, _fabric, (t0, t1), tables = sim_world(2)
    ch0, ch1 = tables[0].lookup(1), tables[1].lookup(0)

    async def main():
        async def bad_writer():
            # Header announces one 8-byte frame, but only 4 bytes follow.
            header = (1).to_bytes(4, "little") + (8).to_bytes(8, "little") + bytes([0, 0])
            await await_request(t0, t0.post_send(ch0.id, 1, MESSAGE_TAG, header))
            await await_request(t0, t0.post_send(ch0.id, 1, 16, b"1234"))

        async def reader():
            with pytest.raises(ProtocolError) as info:
                await read_message(t1, ch1)
            assert info.value.expected == 8
            assert info.value.actual == 4

        await gather(bad_writer(), reader())

    loop.run_until_complete(main())


# -- progress modes ---------------------------------------------------------------

async def _pingpong_leader(transport, channel, size, iters):
    clock = transport.clock
    samples = []
    payload = make_frame(b"x" * size)
    for _ in range(iters):
        start = clock.now()
        await send_payload(transport, channel, 50, payload)
        await recv_payload(transport, channel, 51)
        samples.append(clock.to_seconds(clock.now() - start) / 2)
    return samples


async def _pingpong_echo(transport, channel, iters):
    for _ in range(iters):
        frame = await recv_payload(transport, channel, 50)
        await send_payload(transport, channel, 51, frame)


def run_pingpong(mode, size=1, iters=10, link=None):
    loop, _fabric, (t0, t1), tables = sim_world(2, link=link or LinkModel(latency=0.0, bandwidth=10**9))
    ch0, ch1 = tables[0].lookup(1), tables[1].lookup(0)

    async def main():
        set_progress_mode(t0, mode)
        set_progress_mode(t1, mode)
        samples, _ = await gather(
            _pingpong_leader(t0, ch0, size, iters),
            _pingpong_echo(t1, ch1, iters),
        )
        return samples

    samples = loop.run_until_complete(main(), max_rounds=5_000_000)
    return samples, loop


def test_cooperative_pingpong_uses_few_rounds():
    samples, loop = run_pingpong(ProgressMode.cooperative(), iters=1)
    assert len(samples) == 1
    assert loop.rounds < 100


def test_periodic_latency_has_interval_floor():
    interval = 0.005
    samples, _ = run_pingpong(ProgressMode.periodic(interval), iters=10)
    mean = sum(samples) / len(samples)
    assert mean >= (interval / 2) * 0.8


def test_cooperative_beats_periodic_by_2x():
    coop, _ = run_pingpong(ProgressMode.cooperative(), iters=10)
    slow, _ = run_pingpong(ProgressMode.periodic(0.001), iters=10)
    assert sum(slow) / len(slow) >= 2 * (sum(coop) / len(coop))


def test_modes_deliver_identical_bytes():
    rng = random.Random(99)
    corpus = []
    for _ in range(6):
        frames = [
            make_frame(rng.randbytes(rng.randrange(0, 2048)),
                       domain=rng.choice([MemoryDomain.HOST, MemoryDomain.DEVICE_SIM]))
            for _ in range(rng.randrange(0, 5))
        ]
        corpus.append(Message(frames))

    def snapshot(mode):
        got = run_message_roundtrip(corpus, max_chunk=500, mode=mode)
        return [[f.to_bytes() for f in m.frames] for m in got]

    assert snapshot(ProgressMode.cooperative()) == snapshot(ProgressMode.periodic(0.002))


def test_mode_switch_with_pending_transfers_rejected():
    loop, _fabric, (t0, _t1), _tables = sim_world(2)

    async def main():
        t0.post_send(0, 1, 60, b"hang")
        with pytest.raises(UsageError):
            set_progress_mode(t0, ProgressMode.periodic(0.001))

    loop.run_until_complete(main())
