import asyncio
import contextlib
import logging
import os
import socket
import sys
import tempfile
from typing import List, Optional, Sequence, Tuple

from balancedfmm.config import write_roster
from balancedfmm.errors import TransportError

logger = logging.getLogger(__name__)


def free_ports(count: int, host: str = "127.0.0.1") -> List[int]:
    """Ask the OS for `count` distinct unused ports."""
    sockets, ports = [], []
    try:
        for _ in range(count):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.bind((host, 0))
            sockets.append(s)
            ports.append(s.getsockname()[1])
    finally:
        for s in sockets:
            s.close()
    return ports


def local_roster(ranks: int, host: str = "127.0.0.1") -> List[Tuple[str, int]]:
    return [(host, port) for port in free_ports(ranks, host)]


class RankLauncher:
    """Runs one `balancedfmm-bench` process per rank on this machine."""

    def __init__(self, ranks: int, argv: Sequence[str], roster_path: Optional[str] = None,
                 host: str = "127.0.0.1", timeout: Optional[float] = None):
        self.ranks = ranks
        self.argv = list(argv)
        self.host = host
        self.timeout = timeout
        self.roster_path = roster_path
        self.processes: List[asyncio.subprocess.Process] = []

    def _write_roster(self) -> str:
        if self.roster_path is None:
            fd, self.roster_path = tempfile.mkstemp(prefix="balancedfmm-roster-", suffix=".txt")
            os.close(fd)
        write_roster(self.roster_path, local_roster(self.ranks, self.host))
        return self.roster_path

    async def run(self) -> List[int]:
        roster = self._write_roster()
        logger.info(f"launching {self.ranks} rank processes, roster {roster}")
        try:
            for rank in range(self.ranks):
                cmd = [sys.executable, "-m", "balancedfmm.cli", *self.argv, "--rank", str(rank), "--roster", roster]
                self.processes.append(await asyncio.create_subprocess_exec(*cmd))
            waits = asyncio.gather(*(p.wait() for p in self.processes))
            codes = await asyncio.wait_for(waits, self.timeout) if self.timeout else await waits
        except asyncio.TimeoutError:
            logger.error(f"rank processes did not finish within {self.timeout}s, killing them")
            await self.stop()
            raise TransportError(f"rank processes timed out after {self.timeout}s") from None
        except Exception:
            await self.stop()
            raise
        failed = [r for r, code in enumerate(codes) if code != 0]
        if failed:
            raise TransportError(f"rank process(es) {failed} exited with codes {[codes[r] for r in failed]}")
        return list(codes)

    async def stop(self):
        for process in self.processes:
            if process.returncode is None:
                with contextlib.suppress(ProcessLookupError):
                    process.kill()
        for process in self.processes:
            with contextlib.suppress(Exception):
                await process.wait()
