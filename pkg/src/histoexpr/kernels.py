"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise (or when
``HISTOEXPR_PURE_PYTHON=1``) the numpy implementations take over.
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels

_compiled: ModuleType | None
try:
    from . import _kernels as _compiled  # type: ignore[attr-defined]
except ImportError:  # pragma: no cover - depends on build
    _compiled = None

BACKENDS: dict[str, ModuleType] = {"python": _pykernels}
if _compiled is not None:
    BACKENDS["cython"] = _compiled

if _compiled is not None and os.environ.get("HISTOEXPR_PURE_PYTHON", "") not in ("1", "true"):
    BACKEND = "cython"
else:
    BACKEND = "python"


def get_backend(name: str | None = None) -> ModuleType:
    name = name or BACKEND
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable (have {sorted(BACKENDS)})")
    return BACKENDS[name]
