"""Process-wide execution switches."""
from __future__ import annotations

import contextlib
import os
import threading

ENV_DETERMINISTIC = "FEDSEG_DETERMINISTIC"

_compute_lock = threading.Lock()


def deterministic() -> bool:
    return os.environ.get(ENV_DETERMINISTIC, "") == "1"


def compute_slot():
    """Serializes client computation when deterministic mode is on, so
    concurrent in-process clients behave as a single worker."""
    return _compute_lock if deterministic() else contextlib.nullcontext()


def limit_threads():
    """Pin BLAS to one thread in deterministic mode; returns a controller
    (or ``None``) that keeps the limit alive."""
    if not deterministic():
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)
