import asyncio
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

from balancedfmm.errors import DeadlockError, ProtocolError, TransportError

logger = logging.getLogger(__name__)

WATCHDOG_TICK = 0.25


class Stage(IntEnum):
    HANDSHAKE = 0
    TREE = 1
    M2L = 2
    P2P = 3
    GATHER = 4
    BARRIER = 5


class Tag(NamedTuple):
    stage: int
    level: int
    purpose: int


@dataclass(eq=False)
class SendToken:
    peer: int
    tag: Tag
    nbytes: int
    future: asyncio.Future

    def done(self) -> bool:
        return self.future.done()

    @property
    def payload(self) -> None:
        self.future.result()


@dataclass(eq=False)
class RecvToken:
    peer: int
    tag: Tag
    future: asyncio.Future

    def done(self) -> bool:
        return self.future.done()

    @property
    def payload(self) -> bytes:
        return self.future.result()


Token = Union[SendToken, RecvToken]


class Mailbox:
    """Exactly-once matching of incoming (source, tag) messages to receives."""

    def __init__(self, rank: int):
        self.rank = rank
        self._slots: Dict[Tuple[int, Tag], asyncio.Future] = {}
        self._delivered: set = set()
        self._claimed: set = set()

    def _slot(self, key) -> asyncio.Future:
        slot = self._slots.get(key)
        if slot is None:
            slot = asyncio.get_running_loop().create_future()
            self._slots[key] = slot
        return slot

    def deliver(self, source: int, tag: Tag, payload: bytes) -> None:
        key = (source, Tag(*tag))
        if key in self._delivered:
            raise ProtocolError(f"rank {self.rank}: duplicate message from rank {source} with tag {key[1]}")
        self._delivered.add(key)
        slot = self._slot(key)
        if not slot.done():
            slot.set_result(payload)
        if key in self._claimed:
            self._slots.pop(key, None)

    def claim(self, source: int, tag: Tag) -> asyncio.Future:
        key = (source, Tag(*tag))
        if key in self._claimed:
            raise ProtocolError(f"rank {self.rank}: second receive posted for rank {source} tag {key[1]}")
        self._claimed.add(key)
        slot = self._slot(key)
        if key in self._delivered:
            self._slots.pop(key, None)
        return slot

    def unmatched(self) -> List[Tuple[int, Tag]]:
        """Messages that arrived but were never received."""
        return sorted(self._delivered - self._claimed)

    def fail(self, exc: BaseException) -> None:
        for slot in self._slots.values():
            if not slot.done():
                slot.set_exception(exc)


@dataclass
class MessageStats:
    sent: Dict[str, Dict[str, int]] = field(default_factory=dict)
    received: Dict[str, Dict[str, int]] = field(default_factory=dict)

    @staticmethod
    def _bump(table, stage: int, nbytes: int):
        row = table.setdefault(Stage(stage).name, {"messages": 0, "bytes": 0})
        row["messages"] += 1
        row["bytes"] += nbytes

    def record_send(self, stage: int, nbytes: int):
        self._bump(self.sent, stage, nbytes)

    def record_receive(self, stage: int, nbytes: int):
        self._bump(self.received, stage, nbytes)

    def messages(self, stage: Stage, direction: str = "sent") -> int:
        return getattr(self, direction).get(stage.name, {}).get("messages", 0)

    def to_dict(self) -> dict:
        return {"sent": {k: dict(v) for k, v in self.sent.items()},
                "received": {k: dict(v) for k, v in self.received.items()}}


class Endpoint:
    """One rank's view of the fabric: non-blocking point-to-point plus a barrier.

    Child classes only move bytes (`_post`); matching, statistics and the
    watchdog live here.
    """

    def __init__(self, rank: int, size: int, watchdog_timeout: float = 60.0):
        if size < 1 or not 0 <= rank < size:
            raise TransportError(f"rank {rank} is outside [0, {size})")
        self.rank = rank
        self.size = size
        self.watchdog_timeout = watchdog_timeout
        self.mailbox = Mailbox(rank)
        self.stats = MessageStats()
        self._barrier_epoch = 0

    def _check_peer(self, peer: int):
        if not 0 <= peer < self.size:
            raise TransportError(f"rank {self.rank}: unknown rank {peer} (size {self.size})")
        if peer == self.rank:
            raise TransportError(f"rank {self.rank}: cannot message itself")

    def _post(self, peer: int, tag: Tag, payload: bytes) -> SendToken:
        raise NotImplementedError("must be implemented in the child class")

    async def close(self):
        pass

    def _deliver(self, source: int, tag: Tag, payload: bytes) -> None:
        self.stats.record_receive(tag.stage, len(payload))
        self.mailbox.deliver(source, tag, payload)

    def send_nb(self, peer: int, tag: Tag, payload: bytes) -> SendToken:
        self._check_peer(peer)
        tag = Tag(*tag)
        payload = bytes(payload)
        self.stats.record_send(tag.stage, len(payload))
        return self._post(peer, tag, payload)

    def recv_nb(self, peer: int, tag: Tag) -> RecvToken:
        self._check_peer(peer)
        tag = Tag(*tag)
        return RecvToken(peer, tag, self.mailbox.claim(peer, tag))

    async def _watch(self, tokens: Sequence[Token]) -> None:
        """Block until one token completes or the watchdog has counted `watchdog_timeout` idle seconds.

        Idle time is counted in ticks, so a tick stretched by another rank
        hogging the loop still counts once.
        """
        tick = min(WATCHDOG_TICK, self.watchdog_timeout)
        ticks = max(1, math.ceil(self.watchdog_timeout / tick))
        futures = {t.future for t in tokens}
        for _ in range(ticks):
            done, _ = await asyncio.wait(futures, timeout=tick, return_when=asyncio.FIRST_COMPLETED)
            if done:
                return
        waiting = sorted({(t.peer, tuple(t.tag)) for t in tokens})
        logger.error(f"rank {self.rank}: no progress for {self.watchdog_timeout}s, waiting on {waiting[:4]}")
        raise DeadlockError(f"rank {self.rank} idle for {self.watchdog_timeout}s waiting on (rank, tag) {waiting[:4]}")

    async def wait(self, token: Token):
        if not token.done():
            await self._watch([token])
        return token.payload

    async def wait_any(self, tokens: Sequence[Token]) -> Token:
        """Some completed token out of `tokens`; the earliest listed one when several are done."""
        if not tokens:
            raise ValueError("wait_any needs at least one token")
        if not any(t.done() for t in tokens):
            await self._watch(tokens)
        for token in tokens:
            if token.done():
                token.future.result()
                return token
        raise ProtocolError(f"rank {self.rank}: wait_any woke without a completed token")

    async def barrier(self):
        """Collective: gather at rank 0, then release."""
        if self.size == 1:
            return
        self._barrier_epoch += 1
        arrive = Tag(Stage.BARRIER, self._barrier_epoch, 0)
        release = Tag(Stage.BARRIER, self._barrier_epoch, 1)
        if self.rank == 0:
            for q in range(1, self.size):
                await self.wait(self.recv_nb(q, arrive))
            sends = [self.send_nb(q, release, b"") for q in range(1, self.size)]
            for token in sends:
                await self.wait(token)
        else:
            await self.wait(self.send_nb(0, arrive, b""))
            await self.wait(self.recv_nb(0, release))

    def check_drained(self) -> Optional[str]:
        leftovers = self.mailbox.unmatched()
        if leftovers:
            return f"rank {self.rank}: {len(leftovers)} message(s) never received, first {leftovers[0]}"
        return None
