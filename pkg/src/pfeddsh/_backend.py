"""Kernel backend selection.

The compiled ``_ckernels`` module is used when it imports; otherwise the
numpy kernels in ``_kernels_py``. Setting ``PFEDDSH_PURE_PYTHON=1`` forces the
numpy path. Runs are only bit-reproducible within one backend.
"""

from __future__ import annotations

import contextlib
import os
from types import ModuleType

from . import _kernels_py

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_AVAILABLE: dict[str, ModuleType] = {"numpy": _kernels_py}
if _ckernels is not None:
    _AVAILABLE["cython"] = _ckernels

if os.environ.get("PFEDDSH_PURE_PYTHON") or _ckernels is None:
    kernels: ModuleType = _kernels_py
else:
    kernels = _ckernels


def available() -> list[str]:
    return sorted(_AVAILABLE)


def name() -> str:
    return kernels.NAME


def set_backend(backend: str) -> str:
    """Switch the active kernels; returns the previous backend name."""
    global kernels
    if backend not in _AVAILABLE:
        raise ValueError(f"backend {backend!r} not available (have {available()})")
    prev = kernels.NAME
    kernels = _AVAILABLE[backend]
    return prev


@contextlib.contextmanager
def using(backend: str):
    prev = set_backend(backend)
    try:
        yield
    finally:
        set_backend(prev)
