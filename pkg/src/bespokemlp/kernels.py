"""Kernel backend selection: the compiled extension when importable, else numpy.

Set ``BESPOKEMLP_PURE=1`` to force the pure-Python backend.
"""

import os

from . import _kernels_py

BACKEND = "python"
if not os.environ.get("BESPOKEMLP_PURE"):
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

forward_batch = _impl.forward_batch
nondominated_ranks = _impl.nondominated_ranks

__all__ = ["BACKEND", "forward_batch", "nondominated_ranks"]
