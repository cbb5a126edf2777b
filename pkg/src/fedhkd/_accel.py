"""Backend switch for the compiled kernels.

Set ``FEDHKD_NUMBA=0`` before import to force the pure-numpy path. When
numba is missing the numpy path is used regardless of the flag.
"""

import os

_FLAG = os.environ.get("FEDHKD_NUMBA", "1").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

USE_NUMBA = _numba is not None and _FLAG not in ("0", "false", "no", "off")
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise the identity decorator."""
    if _numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    return _numba.njit(*args, **kwargs)
