"""Backend selection for the marker kernels.

The compiled extension is used when it imports; setting the environment
variable ``VPCONVEX_PURE_PYTHON=1`` forces the numpy fallback.  ``BACKEND``
names the active implementation.
"""

import os

from . import _kernels_py

if os.environ.get("VPCONVEX_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"

interpolate = _impl.interpolate
kick = _impl.kick
drift = _impl.drift
deposit = _impl.deposit
spline_gradient = _impl.spline_gradient
spline_kick = _impl.spline_kick
spline_deposit = _impl.spline_deposit


def backends():
    """All importable backends as ``{name: module}``."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels
    except ImportError:
        return out
    out["compiled"] = _kernels
    return out
