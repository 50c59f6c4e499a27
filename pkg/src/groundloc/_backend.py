"""Kernel backend selection.

The compiled extension is used when importable; set ``GROUNDLOC_PURE_PYTHON=1``
to force the numpy fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

kernels = _kernels_py
if os.environ.get("GROUNDLOC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as kernels  # type: ignore[no-redef]
    except ImportError:  # extension not built
        kernels = _kernels_py

BACKEND: str = kernels.BACKEND


def available_backends() -> dict:
    out = {"python": _kernels_py}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
