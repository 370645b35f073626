import asyncio
import logging
from typing import Dict, List, Optional

from balancedfmm.transport.base import Endpoint, SendToken, Tag

logger = logging.getLogger(__name__)


class MemoryFabric:
    """All ranks of a run inside one event loop.

    `delays` maps a source rank to an artificial delivery latency in seconds,
    which is how tests model a slow peer.
    """

    def __init__(self, size: int, watchdog_timeout: float = 60.0, delays: Optional[Dict[int, float]] = None):
        self.size = size
        self.delays = dict(delays or {})
        self.endpoints: List[MemoryEndpoint] = [MemoryEndpoint(self, r, watchdog_timeout) for r in range(size)]

    def endpoint(self, rank: int) -> "MemoryEndpoint":
        return self.endpoints[rank]

    def message_totals(self) -> Dict[str, int]:
        sent = sum(row["messages"] for ep in self.endpoints for row in ep.stats.sent.values())
        received = sum(row["messages"] for ep in self.endpoints for row in ep.stats.received.values())
        return {"sent": sent, "received": received}


class MemoryEndpoint(Endpoint):
    def __init__(self, fabric: MemoryFabric, rank: int, watchdog_timeout: float = 60.0):
        super().__init__(rank, fabric.size, watchdog_timeout)
        self.fabric = fabric

    def _post(self, peer: int, tag: Tag, payload: bytes) -> SendToken:
        loop = asyncio.get_running_loop()
        token = SendToken(peer, tag, len(payload), loop.create_future())
        target = self.fabric.endpoints[peer]

        def hand_over():
            try:
                target._deliver(self.rank, tag, payload)
            except Exception as e:
                token.future.set_exception(e)
                return
            token.future.set_result(None)

        delay = self.fabric.delays.get(self.rank, 0.0)
        if delay > 0:
            loop.call_later(delay, hand_over)
        else:
            hand_over()
        return token
