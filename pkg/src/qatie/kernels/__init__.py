"""Hot-kernel dispatch: numba-compiled loops or the pure-numpy fallback.

Every entry point resolves the backend at call time, so ``set_backend``
switches paths mid-process (the benchmark relies on this).
"""

from __future__ import annotations

from ..backend import get_backend
from . import numpy_impl

_numba_impl = None


def _impl():
    global _numba_impl
    if get_backend() == "numba":
        if _numba_impl is None:
            from . import numba_impl

            _numba_impl = numba_impl
        return _numba_impl
    return numpy_impl


def conv2d_forward(x, w, stride, padding):
    return _impl().conv2d_forward(x, w, stride, padding)


def conv2d_backward_input(g, w, stride, padding, in_shape):
    return _impl().conv2d_backward_input(g, w, stride, padding, in_shape)


def conv2d_backward_weight(g, x, stride, padding, w_shape):
    return _impl().conv2d_backward_weight(g, x, stride, padding, w_shape)


def int_conv2d_acc(q, w, stride, padding):
    return _impl().int_conv2d_acc(q, w, stride, padding)


def instance_norm_forward(x, gamma, beta, eps):
    return _impl().instance_norm_forward(x, gamma, beta, eps)
