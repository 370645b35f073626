import asyncio
import time

import pytest

from balancedfmm.config import read_roster, write_roster
from balancedfmm.errors import DeadlockError, ProtocolError, TransportError
from balancedfmm.transport import MemoryFabric, Stage, Tag, TcpEndpoint
from balancedfmm.transport.launcher import local_roster
from balancedfmm.transport.tcp import EndpointState

from conftest import run_async

TAG = Tag(Stage.M2L, 2, 0)


def test_ping():
    async def scenario():
        fabric = MemoryFabric(2, 5.0)
        a, b = fabric.endpoint(0), fabric.endpoint(1)
        recv = b.recv_nb(0, TAG)
        send = a.send_nb(1, TAG, b"hello")
        await a.wait(send)
        assert await b.wait(recv) == b"hello"
        assert a.stats.messages(Stage.M2L, "sent") == 1
        assert b.stats.messages(Stage.M2L, "received") == 1
        assert fabric.message_totals() == {"sent": 1, "received": 1}

    run_async(scenario())


def test_zero_byte_message_and_receive_posted_late():
    async def scenario():
        fabric = MemoryFabric(2, 5.0)
        a, b = fabric.endpoint(0), fabric.endpoint(1)
        await a.wait(a.send_nb(1, TAG, b""))
        assert await b.wait(b.recv_nb(0, TAG)) == b""
        assert b.check_drained() is None

    run_async(scenario())


def test_duplicate_message_is_a_protocol_error():
    async def scenario():
        fabric = MemoryFabric(2, 5.0)
        a = fabric.endpoint(0)
        await a.wait(a.send_nb(1, TAG, b"x"))
        with pytest.raises(ProtocolError):
            await a.wait(a.send_nb(1, TAG, b"y"))

    run_async(scenario())


def test_second_receive_for_same_tag_is_a_protocol_error():
    async def scenario():
        b = MemoryFabric(2, 5.0).endpoint(1)
        b.recv_nb(0, TAG)
        with pytest.raises(ProtocolError):
            b.recv_nb(0, TAG)

    run_async(scenario())


def test_unknown_or_self_peer_is_rejected():
    async def scenario():
        a = MemoryFabric(2, 5.0).endpoint(0)
        with pytest.raises(TransportError):
            a.send_nb(0, TAG, b"")
        with pytest.raises(TransportError):
            a.recv_nb(5, TAG)

    run_async(scenario())


def test_wait_any_returns_first_completed():
    async def scenario():
        fabric = MemoryFabric(3, 5.0, delays={1: 0.3})
        root = fabric.endpoint(0)
        slow, fast = root.recv_nb(1, TAG), root.recv_nb(2, TAG)
        fabric.endpoint(1).send_nb(0, TAG, b"slow")
        fabric.endpoint(2).send_nb(0, TAG, b"fast")
        first = await root.wait_any([slow, fast])
        assert first is fast
        assert first.payload == b"fast"
        second = await root.wait_any([slow])
        assert second.payload == b"slow"

    run_async(scenario())


def test_send_and_receive_return_at_once_with_a_slow_peer():
    async def scenario():
        fabric = MemoryFabric(2, 5.0, delays={0: 0.5})
        slow, root = fabric.endpoint(0), fabric.endpoint(1)
        start = time.perf_counter()
        send = slow.send_nb(1, TAG, b"x" * 4096)
        recv = root.recv_nb(0, TAG)
        posted = time.perf_counter() - start
        assert posted < 0.1
        assert not send.done() and not recv.done()
        assert await root.wait(recv) == b"x" * 4096
        assert time.perf_counter() - start >= 0.4
        await slow.wait(send)

    run_async(scenario())


def test_barrier_releases_everyone():
    async def scenario():
        fabric = MemoryFabric(4, 5.0, delays={3: 0.1})
        await asyncio.gather(*(ep.barrier() for ep in fabric.endpoints))
        await asyncio.gather(*(ep.barrier() for ep in fabric.endpoints))
        assert all(ep.check_drained() is None for ep in fabric.endpoints)

    run_async(scenario())


def test_unmatched_receive_trips_the_watchdog():
    async def scenario():
        b = MemoryFabric(2, 0.3).endpoint(1)
        with pytest.raises(DeadlockError):
            await b.wait(b.recv_nb(0, TAG))

    run_async(scenario())


def test_unreceived_message_is_reported():
    async def scenario():
        fabric = MemoryFabric(2, 5.0)
        fabric.endpoint(0).send_nb(1, TAG, b"orphan")
        assert "never received" in fabric.endpoint(1).check_drained()

    run_async(scenario())


def test_roster_file(tmp_path):
    path = tmp_path / "roster.txt"
    write_roster(path, [("127.0.0.1", 5000), ("127.0.0.1", 5001)])
    path.write_text("# ranks\n" + path.read_text() + "\n")
    assert read_roster(path) == [("127.0.0.1", 5000), ("127.0.0.1", 5001)]
    path.write_text("localhost\n")
    with pytest.raises(ValueError):
        read_roster(path)


def test_tcp_loopback():
    async def scenario():
        roster = local_roster(2)
        endpoints = [TcpEndpoint(r, roster, watchdog_timeout=10.0) for r in range(2)]
        await asyncio.gather(*(ep.start() for ep in endpoints))
        try:
            a, b = endpoints
            big = bytes(range(256)) * 1000
            recv_big, recv_empty = b.recv_nb(0, TAG), b.recv_nb(0, Tag(Stage.P2P, 1, 0))
            sends = [a.send_nb(1, TAG, big), a.send_nb(1, Tag(Stage.P2P, 1, 0), b"")]
            assert await b.wait(recv_big) == big
            assert await b.wait(recv_empty) == b""
            for token in sends:
                await a.wait(token)
            await asyncio.gather(a.barrier(), b.barrier())
        finally:
            await asyncio.gather(*(ep.close() for ep in endpoints))
        assert all(ep.state is EndpointState.CLOSED for ep in endpoints)
        with pytest.raises(TransportError):
            endpoints[0].send_nb(1, TAG, b"late")
        assert not await endpoints[0].start()

    run_async(scenario())
