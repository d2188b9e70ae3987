"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy fallback in ``_kernels_py``. Set ``SBLM_PURE_PYTHON=1`` to force the
fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SBLM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py


def lstm_gates_forward(pre, c_prev):
    return _impl.lstm_gates_forward(np.ascontiguousarray(pre), np.ascontiguousarray(c_prev))


def lstm_gates_backward(gates, c_prev, tanh_c, dh, dc_next):
    return _impl.lstm_gates_backward(*(np.ascontiguousarray(a) for a in
                                       (gates, c_prev, tanh_c, dh, dc_next)))


def dtw(cost):
    return _impl.dtw(np.ascontiguousarray(cost, dtype=np.float64))


__all__ = ["BACKEND", "lstm_gates_forward", "lstm_gates_backward", "dtw"]
