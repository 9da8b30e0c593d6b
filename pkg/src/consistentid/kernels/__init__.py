"""Convolution kernel backend selection.

The compiled extension is preferred when importable; the numpy fallback is
always available. CONSISTENTID_KERNELS=numpy|cython forces a backend
(useful for the benchmark and for debugging parity issues).
"""

from __future__ import annotations

import os

from . import numpy_backend

_requested = os.environ.get("CONSISTENTID_KERNELS", "auto").lower()

_impl = numpy_backend
BACKEND = "numpy"

if _requested in ("auto", "cython"):
    try:
        from . import _convcore

        _impl = _convcore
        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
elif _requested != "numpy":
    raise ValueError(f"CONSISTENTID_KERNELS must be auto|numpy|cython, got {_requested!r}")

conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weights = _impl.conv2d_grad_weights


def backend_name() -> str:
    return BACKEND


def available_backends() -> dict:
    """Backends importable in this environment, for benchmarks and tests."""
    out = {"numpy": numpy_backend}
    try:
        from . import _convcore as ext
        out["cython"] = ext
    except ImportError:
        pass
    return out
