"""Kernel backend selection.

The hot inner loops (float convolution forward/backward and the integer
convolution) exist twice: a numba-compiled version and a pure-numpy
fallback. The ``QATIE_BACKEND`` environment variable picks the default:

    QATIE_BACKEND=numba   force numba, raise if it cannot be imported
    QATIE_BACKEND=numpy   force the pure-numpy path
    QATIE_BACKEND=auto    numba when importable, numpy otherwise (default)

``set_backend`` overrides the choice at runtime (used by the benchmark to
time both paths in one process). Within one backend, results are
bit-deterministic for fixed inputs; across backends, float results may
differ by summation order at the level of a few ulps.
"""

from __future__ import annotations

import os

from .errors import ConfigError

VALID_BACKENDS = ("numba", "numpy")

_backend: str | None = None


def numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def _resolve(name: str) -> str:
    name = name.lower()
    if name == "auto":
        return "numba" if numba_available() else "numpy"
    if name not in VALID_BACKENDS:
        raise ConfigError(
            f"unknown backend {name!r}; expected one of 'auto', 'numba', 'numpy'"
        )
    if name == "numba" and not numba_available():
        raise ConfigError("backend 'numba' requested but numba is not importable")
    return name


def get_backend() -> str:
    """Active kernel backend, resolving the environment flag on first use."""
    global _backend
    if _backend is None:
        _backend = _resolve(os.environ.get("QATIE_BACKEND", "auto"))
    return _backend


def set_backend(name: str) -> str:
    """Override the backend ('numba', 'numpy', or 'auto'). Returns the resolved name."""
    global _backend
    _backend = _resolve(name)
    return _backend
