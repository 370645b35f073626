import asyncio
import contextlib
import logging
import struct
import time
import traceback
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

from balancedfmm.errors import ProtocolError, TransportError
from balancedfmm.transport.base import Endpoint, SendToken, Tag

logger = logging.getLogger(__name__)

FRAME = struct.Struct("<3IQ")
HELLO = struct.Struct("<I")


class EndpointState(Enum):
    STOPPED = "stopped"
    STARTING = "starting"
    RUNNING = "running"
    FAILED = "failed"
    CLOSED = "closed"


class TcpEndpoint(Endpoint):
    """Length-prefixed frames over one TCP connection per ordered rank pair.

    Rank p listens on roster[p] and dials every other rank; the dialled
    connection carries p -> q traffic only, announced by a u32 hello.
    """

    def __init__(self, rank: int, roster: Sequence[Tuple[str, int]], watchdog_timeout: float = 60.0,
                 connect_timeout: float = 30.0):
        super().__init__(rank, len(roster), watchdog_timeout)
        self.roster = list(roster)
        self.connect_timeout = connect_timeout

        self._server: Optional[asyncio.AbstractServer] = None
        self._writers: Dict[int, asyncio.StreamWriter] = {}
        self._write_locks: Dict[int, asyncio.Lock] = {}
        self._reader_tasks: List[asyncio.Task] = []
        self._send_tasks: set = set()

        self.state = EndpointState.STOPPED
        self._state_lock = asyncio.Lock()

    async def start(self) -> bool:
        async with self._state_lock:
            if self.state != EndpointState.STOPPED:
                logger.warning(f"rank {self.rank}: endpoint already in state {self.state}")
                return False
            self.state = EndpointState.STARTING

        host, port = self.roster[self.rank]
        try:
            self._server = await asyncio.start_server(self._serve_peer, host, port)
            for q in range(self.size):
                if q != self.rank:
                    self._writers[q] = await self._dial(q)
                    self._write_locks[q] = asyncio.Lock()
        except (OSError, asyncio.TimeoutError) as e:
            logger.error(f"rank {self.rank}: could not join the roster: {e}")
            async with self._state_lock:
                self.state = EndpointState.FAILED
            await self._shutdown()
            raise TransportError(f"rank {self.rank} failed to start on {host}:{port}: {e}") from e

        async with self._state_lock:
            self.state = EndpointState.RUNNING
        logger.debug(f"rank {self.rank}: connected to {self.size - 1} peer(s)")
        return True

    async def _dial(self, peer: int) -> asyncio.StreamWriter:
        host, port = self.roster[peer]
        deadline = time.monotonic() + self.connect_timeout
        while True:
            try:
                _, writer = await asyncio.open_connection(host, port)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise
                await asyncio.sleep(0.05)
        writer.write(HELLO.pack(self.rank))
        await writer.drain()
        return writer

    async def _serve_peer(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self._reader_tasks.append(asyncio.current_task())
        peer = None
        try:
            (peer,) = HELLO.unpack(await reader.readexactly(HELLO.size))
            if not 0 <= peer < self.size or peer == self.rank:
                raise ProtocolError(f"rank {self.rank}: hello from unexpected rank {peer}")
            while True:
                try:
                    header = await reader.readexactly(FRAME.size)
                except asyncio.IncompleteReadError as e:
                    if e.partial:
                        raise ProtocolError(f"rank {self.rank}: truncated frame header from rank {peer}")
                    break
                stage, level, purpose, length = FRAME.unpack(header)
                payload = await reader.readexactly(length) if length else b""
                self._deliver(peer, Tag(stage, level, purpose), payload)
        except asyncio.CancelledError:
            raise
        except Exception as e:
            logger.error(f"rank {self.rank}: reader for rank {peer} failed: {e}")
            logger.debug(traceback.format_exc())
            error = e if isinstance(e, TransportError) else TransportError(f"connection from rank {peer} failed: {e}")
            self.mailbox.fail(error)
        finally:
            writer.close()

    def _post(self, peer: int, tag: Tag, payload: bytes) -> SendToken:
        if self.state != EndpointState.RUNNING:
            raise TransportError(f"rank {self.rank}: cannot send, endpoint state {self.state}")
        token = SendToken(peer, tag, len(payload), asyncio.get_running_loop().create_future())
        task = asyncio.create_task(self._write(peer, tag, payload, token))
        self._send_tasks.add(task)
        task.add_done_callback(self._send_tasks.discard)
        return token

    async def _write(self, peer: int, tag: Tag, payload: bytes, token: SendToken):
        writer = self._writers[peer]
        try:
            async with self._write_locks[peer]:
                writer.write(FRAME.pack(*tag, len(payload)))
                if payload:
                    writer.write(payload)
                await writer.drain()
        except Exception as e:
            logger.error(f"rank {self.rank}: send of {tag} to rank {peer} failed: {e}")
            token.future.set_exception(TransportError(f"send to rank {peer} failed: {e}"))
            return
        token.future.set_result(None)

    async def close(self):
        async with self._state_lock:
            if self.state in (EndpointState.STOPPED, EndpointState.CLOSED):
                return
            self.state = EndpointState.CLOSED
        await self._shutdown()
        logger.debug(f"rank {self.rank}: endpoint closed")

    async def _shutdown(self):
        if self._send_tasks:
            await asyncio.gather(*self._send_tasks, return_exceptions=True)
        for writer in self._writers.values():
            writer.close()
            with contextlib.suppress(Exception):
                await writer.wait_closed()
        self._writers.clear()
        if self._server is not None:
            self._server.close()
        readers = [t for t in self._reader_tasks if t is not None]
        for task in readers:
            if not task.done():
                task.cancel()
        if readers:
            await asyncio.gather(*readers, return_exceptions=True)
        self._reader_tasks.clear()
        if self._server is not None:
            with contextlib.suppress(Exception):
                await asyncio.wait_for(self._server.wait_closed(), 5.0)
            self._server = None
