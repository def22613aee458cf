"""Kernel backend selection.

The compiled extension is preferred when importable; ``GPROBIT_BACKEND``
overrides (``auto`` | ``compiled`` | ``python``).  Both backends expose
the same module-level functions, so callers grab the module once via
:func:`get_kernels`.
"""

from __future__ import annotations

import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built; fall back silently
    _compiled = None


def get_kernels(backend: str | None = None):
    """Return the kernel module for ``backend`` (default: env/auto choice)."""
    choice = backend or os.environ.get("GPROBIT_BACKEND", "auto")
    if choice == "python":
        return _kernels_py
    if choice == "compiled":
        if _compiled is None:
            raise RuntimeError(
                "compiled kernels requested but the gprobit._kernels "
                "extension is not available; rebuild or use GPROBIT_BACKEND=python"
            )
        return _compiled
    if choice == "auto":
        return _compiled if _compiled is not None else _kernels_py
    raise ValueError(f"unknown backend {choice!r}")


def backend_name(backend: str | None = None) -> str:
    return get_kernels(backend).BACKEND_NAME
