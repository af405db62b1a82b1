"""Thread caps and run manifests."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import platform
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__

THREADS_ENV = "ZONESEG_THREADS"
_limiter = None


def resolve_threads(requested: Optional[int] = None) -> int:
    if requested is None:
        requested = int(os.environ.get(THREADS_ENV, "1"))
    if requested < 1:
        raise ValueError("thread count must be >= 1")
    return requested


def set_threads(n: int) -> None:
    """Cap BLAS/OpenMP pools; ``n == 1`` gives bit-reproducible GEMMs."""
    global _limiter
    _limiter = threadpool_limits(limits=n)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, config: dict, seeds: dict, inputs: Iterable = (), threads: int = 1) -> Path:
    """Write ``manifest.json``; its ``config`` block can be fed back via ``--config``.

    Timestamps and host details live only here, so every other file in the
    run directory stays byte-reproducible.
    """
    out_dir = Path(out_dir)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "threads": threads,
        "tool_version": __version__,
        "numpy_version": np.__version__,
        "python": platform.python_version(),
        "inputs": {str(p): file_digest(p) for p in sorted(map(str, inputs))},
        "timestamp_utc": started,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
