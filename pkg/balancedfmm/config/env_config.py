import os

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

FMM_BACKEND = os.getenv("FMM_BACKEND", "memory")
FMM_ROSTER = os.getenv("FMM_ROSTER")
FMM_RANK = os.getenv("FMM_RANK")
FMM_WATCHDOG_TIMEOUT = float(os.getenv("FMM_WATCHDOG_TIMEOUT", "60"))
FMM_LOG_LEVEL = os.getenv("FMM_LOG_LEVEL", "INFO")


def read_roster(path):
    """Read a host:port list file, one rank per line, blank lines and # comments ignored."""
    roster = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            host, _, port = line.rpartition(":")
            if not host or not port.isdigit():
                raise ValueError(f"Bad roster line {line!r} in {path}, expected host:port")
            roster.append((host, int(port)))
    return roster


def write_roster(path, roster):
    with open(path, "w", encoding="utf-8") as f:
        for host, port in roster:
            f.write(f"{host}:{port}\n")
