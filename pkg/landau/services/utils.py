import hashlib
import logging
import os
import subprocess
from datetime import datetime, timezone

import torch

from landau.config import BASE_DIR, LANDAU_THREADS, SOFTWARE_VERSION

logger = logging.getLogger(__name__)


def utc_now() -> datetime:
    """Returns the current time in UTC"""
    return datetime.now(timezone.utc)


def configure_threads(threads: int = LANDAU_THREADS) -> int:
    if threads < 1:
        raise ValueError("thread count must be >= 1")
    torch.set_num_threads(threads)
    os.environ["OMP_NUM_THREADS"] = str(threads)
    logger.debug("using %d threads", threads)
    return threads


def software_version() -> str:
    """Package version, suffixed with `git describe` when run from a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=BASE_DIR, capture_output=True, text=True, timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return SOFTWARE_VERSION
    described = out.stdout.strip()
    return f"{SOFTWARE_VERSION}+{described}" if out.returncode == 0 and described else SOFTWARE_VERSION


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()
