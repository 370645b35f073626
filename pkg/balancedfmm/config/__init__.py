from .env_config import (
    FMM_BACKEND,
    FMM_ROSTER,
    FMM_RANK,
    FMM_WATCHDOG_TIMEOUT,
    FMM_LOG_LEVEL,
    read_roster,
    write_roster,
)

__all__ = [
    "FMM_BACKEND",
    "FMM_ROSTER",
    "FMM_RANK",
    "FMM_WATCHDOG_TIMEOUT",
    "FMM_LOG_LEVEL",
    "read_roster",
    "write_roster",
]
