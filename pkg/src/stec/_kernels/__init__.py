"""Kernel backend selection.

Prefers the compiled Cython extension; falls back to the pure-Python
implementation when the extension is unavailable or when the
``STEC_PURE_PYTHON`` environment variable is set (useful for benchmarks
and for verifying bit-exact equivalence of the two backends).
"""

import os

from . import _pure

if os.environ.get("STEC_PURE_PYTHON"):
    _impl = _pure
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = _pure

BACKEND = _impl.BACKEND
rc_encode = _impl.rc_encode
rc_decode = _impl.rc_decode
mc_search = _impl.mc_search


def get_backend(name):
    """Return the named kernel module ('cython' or 'python')."""
    if name == "python":
        return _pure
    if name == "cython":
        from . import _core
        return _core
    raise ValueError(f"unknown kernel backend: {name}")
