"""Numba acceleration switch.

Hot kernels in :mod:`twinforge.kernels` ship in two flavours: a numba
``@njit`` build and a pure-numpy build. Selection happens once at import
time:

* ``TWINFORGE_NUMBA=0`` (or ``false``/``off``) forces the numpy path;
* otherwise numba is used whenever it imports cleanly.

Both flavours implement the same arithmetic; results agree to floating
point noise (summation order differs), and each flavour is individually
deterministic. ``python benchmarks/bench_kernels.py`` times the two.
"""

import os

_FLAG = os.environ.get("TWINFORGE_NUMBA", "1").strip().lower()
_WANT_NUMBA = _FLAG not in ("0", "false", "off", "no")

if _WANT_NUMBA:
    try:
        from numba import njit  # noqa: F401

        NUMBA_ENABLED = True
    except ImportError:
        NUMBA_ENABLED = False
else:
    NUMBA_ENABLED = False


def maybe_jit(func):
    """Compile ``func`` with numba when enabled, else return it unchanged.

    Used for kernels whose python fallback is the same source interpreted
    (loop bodies cheap enough without compilation).
    """
    if NUMBA_ENABLED:
        from numba import njit

        return njit(cache=True)(func)
    return func
