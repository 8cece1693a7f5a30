"""Kernel backend selection: compiled extension with numpy fallback.

The compiled module (_ckern, built from _ckern.pyx) is preferred when it
imports cleanly; otherwise the pure numpy backend serves every call.
Set TAPLEARN_BACKEND=numpy|compiled to force a choice at import time, or
pass a backend name explicitly where a config accepts one.
"""

from __future__ import annotations

import os
from types import ModuleType

from taplearn.errors import ConfigError
from taplearn.kernels import numpy_backend

_compiled: ModuleType | None
try:
    from taplearn.kernels import _ckern as _compiled
except ImportError:
    _compiled = None


def available_backends() -> tuple[str, ...]:
    return ("numpy", "compiled") if _compiled is not None else ("numpy",)


def get_backend(name: str | None = None) -> ModuleType:
    """Resolve a backend module by name, or the default for this process."""
    if name is None:
        name = os.environ.get("TAPLEARN_BACKEND") or (
            "compiled" if _compiled is not None else "numpy"
        )
    if name == "numpy":
        return numpy_backend
    if name == "compiled":
        if _compiled is None:
            raise ConfigError("compiled kernel backend is not built")
        return _compiled
    raise ConfigError(f"unknown kernel backend {name!r}")


def default_backend_name() -> str:
    return get_backend().NAME
