"""JIT glue: kernels are numba @njit by default with a pure-Python fallback.

Set AGGBENCH_NO_NUMBA=1 (or "true"/"yes") before importing the package to run
every kernel as plain Python over the same numpy buffers. That path is slow
but byte-for-byte equivalent, which makes it useful for debugging and for the
`aggbench jitbench` comparison.
"""

from __future__ import annotations

import os

NO_NUMBA_ENV = "AGGBENCH_NO_NUMBA"


def _disabled_by_env() -> bool:
    return os.environ.get(NO_NUMBA_ENV, "").strip().lower() in ("1", "true", "yes")


if _disabled_by_env():
    JIT_ENABLED = False
else:
    try:
        import numba  # noqa: F401

        JIT_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a hard dep, but be safe
        JIT_ENABLED = False


if JIT_ENABLED:
    from numba import njit as _numba_njit

    def njit(func=None, **kwargs):
        kwargs.setdefault("cache", True)
        if func is None:
            return lambda f: _numba_njit(**kwargs)(f)
        return _numba_njit(**kwargs)(func)

else:

    def njit(func=None, **kwargs):
        if func is None:
            return lambda f: f
        return func
