"""Backend selection for the token scan.

The compiled extension is used when it imports; ``GDKVM_PURE=1`` forces the
NumPy fallback. Both expose ``scan_forward`` and ``scan_backward``.
"""

import os

from . import _scan_py

try:
    if os.environ.get("GDKVM_PURE", "") not in ("", "0"):
        raise ImportError("pure backend requested")
    from . import _scan as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _scan_py


def scan_forward(S0, K, V, erase, write):
    return _impl.scan_forward(S0, K, V, erase, write)


def scan_backward(hist, K, V, erase, write, G):
    return _impl.scan_backward(hist, K, V, erase, write, G)


def backends():
    """Available implementations by name, compiled first when present."""
    out = {}
    if _compiled is not None:
        out["compiled"] = _compiled
    out["python"] = _scan_py
    return out
