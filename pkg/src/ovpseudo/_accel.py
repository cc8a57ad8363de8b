"""Numba switch.

Hot kernels are written twice: a numba ``@njit`` loop version and a
vectorized numpy version. Which one runs is decided by the
``OVPSEUDO_DISABLE_NUMBA`` environment variable (read at import) and can be
flipped at runtime with :func:`set_numba`.
"""

from __future__ import annotations

import os

ENV_FLAG = "OVPSEUDO_DISABLE_NUMBA"

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get(ENV_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


_enabled = HAS_NUMBA and not _env_disabled()


def numba_enabled() -> bool:
    return _enabled


def set_numba(enabled: bool) -> bool:
    """Select the kernel path; returns the previous setting."""
    global _enabled
    previous = _enabled
    _enabled = bool(enabled) and HAS_NUMBA
    return previous


def njit(func):
    if not HAS_NUMBA:
        return func
    return numba.njit(cache=True)(func)
