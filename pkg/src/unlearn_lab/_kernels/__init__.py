"""Hot-kernel backend selection.

Imports the compiled Cython core when it is available, otherwise falls
back to the pure numpy reference implementation. Set the environment
variable ``UNLEARN_LAB_PURE_PYTHON=1`` before import to force the
fallback (used by tests and the kernel benchmark).
"""

import os

if os.environ.get("UNLEARN_LAB_PURE_PYTHON"):
    from . import np_ref as _impl
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import np_ref as _impl

BACKEND = _impl.BACKEND_NAME
lcs_len = _impl.lcs_len
softmax_xent_fwd = _impl.softmax_xent_fwd
softmax_xent_bwd = _impl.softmax_xent_bwd
scatter_add_rows = _impl.scatter_add_rows
adamw_step = _impl.adamw_step
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
