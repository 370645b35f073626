from .base import Endpoint, Mailbox, MessageStats, RecvToken, SendToken, Stage, Tag
from .memory import MemoryEndpoint, MemoryFabric
from .tcp import EndpointState, TcpEndpoint

__all__ = [
    "Endpoint",
    "EndpointState",
    "Mailbox",
    "MemoryEndpoint",
    "MemoryFabric",
    "MessageStats",
    "RecvToken",
    "SendToken",
    "Stage",
    "Tag",
    "TcpEndpoint",
]
