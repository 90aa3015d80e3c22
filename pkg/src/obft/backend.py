"""Kernel backend selection, fixed at import time.

The compiled extension is used when available; set OBFT_BACKEND=python to
force the numpy fallback (e.g. to benchmark the two against each other). Both
backends produce bit-identical results; see _kernels.pyx / _pykernels.py.
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _kernels
except ImportError:  # extension not built; fall back silently
    _kernels = None

_FORCED = os.environ.get("OBFT_BACKEND", "auto").strip().lower()
if _FORCED not in ("auto", "compiled", "python"):
    raise RuntimeError(f"OBFT_BACKEND must be auto, compiled or python, got {_FORCED!r}")
if _FORCED == "compiled" and _kernels is None:
    raise RuntimeError("OBFT_BACKEND=compiled but the obft._kernels extension is not built")

_ACTIVE = _pykernels if (_kernels is None or _FORCED == "python") else _kernels


def backend_name() -> str:
    return "python" if _ACTIVE is _pykernels else "compiled"


def matmul_into(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    """out <- a @ b with the pinned ascending-k summation order."""
    _ACTIVE.matmul_into(a, b, out)


def matmul_into_python(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    _pykernels.matmul_into(a, b, out)


def matmul_into_compiled(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    if _kernels is None:
        raise RuntimeError("obft._kernels extension is not built")
    _kernels.matmul_into(a, b, out)


def compiled_available() -> bool:
    return _kernels is not None
