"""Kernel backend selection.

The compiled extension is used when importable; set ``MMGL_PURE_PYTHON=1`` to
force the fallback. ``BACKEND`` names whichever was picked.
"""

import os

from . import _kernels_py as python

compiled = None
if os.environ.get("MMGL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled
    except ImportError:
        compiled = None

_impl = compiled if compiled is not None else python
BACKEND = "compiled" if compiled is not None else "python"

jacobi_sweeps = _impl.jacobi_sweeps
lcs_length = _impl.lcs_length
