"""Conv kernel backend selection.

Prefers the compiled extension, falls back to the numpy implementation.
Set SEGMOE_KERNELS=python|cython to force a backend (forcing cython when
the extension is missing raises at import).
"""

import os

from . import _pykernels

_forced = os.environ.get("SEGMOE_KERNELS", "").strip().lower()

if _forced == "python":
    _impl = _pykernels
elif _forced == "cython":
    from . import _ckernels as _impl
elif _forced:
    raise RuntimeError(f"unknown SEGMOE_KERNELS value: {_forced!r}")
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = _impl.BACKEND
conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
