"""Hot numeric kernels with a compiled core and a pure-numpy fallback.

The Cython extension is preferred when it built; ``BASOT_PURE_KERNELS=1``
forces the fallback (used by the equivalence tests and the benchmark).
"""

import os

from . import _pure

if os.environ.get("BASOT_PURE_KERNELS", "0") not in ("", "0"):
    _impl = _pure
    BACKEND = "pure"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pure
        BACKEND = "pure"

ctc_forward_backward = _impl.ctc_forward_backward
edit_counts = _impl.edit_counts
edit_cost = _impl.edit_cost

__all__ = ["BACKEND", "ctc_forward_backward", "edit_counts", "edit_cost"]
