"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly, unless the environment
variable ``OMNIFUSE_NUMBA`` is set to ``0``. Both paths expose identical
signatures; ``BACKEND`` names the one in use.
"""

import os

from omnifuse.kernels import _numpy

_want_numba = os.environ.get("OMNIFUSE_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

if _want_numba:
    try:
        from omnifuse.kernels import _numba as _impl
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba missing
        _impl = _numpy
        BACKEND = "numpy"
else:
    _impl = _numpy
    BACKEND = "numpy"

adam_update = _impl.adam_update
elu_forward = _impl.elu_forward
elu_backward = _impl.elu_backward
im2col = _impl.im2col
col2im = _impl.col2im
threshold_sweep = _impl.threshold_sweep
cosine_rows = _impl.cosine_rows

__all__ = [
    "BACKEND",
    "adam_update",
    "elu_forward",
    "elu_backward",
    "im2col",
    "col2im",
    "threshold_sweep",
    "cosine_rows",
]
