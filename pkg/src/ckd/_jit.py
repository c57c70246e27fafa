"""Numba toggle.

Set ``CKD_NUMBA=0`` to run the relation kernels through the pure-numpy
path. When numba is missing the numpy path is used regardless.
"""

import os
from typing import Any, Callable

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def _njit(*args: Any, **_: Any) -> Any:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def numba_enabled() -> bool:
    return HAVE_NUMBA and os.environ.get("CKD_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def njit(*args: Any, **kwargs: Any) -> Callable:
    kwargs.setdefault("cache", True)
    return _njit(*args, **kwargs)
