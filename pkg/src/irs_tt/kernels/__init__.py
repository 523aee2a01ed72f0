"""AGD sweep kernels: compiled Cython core with a numpy fallback.

The compiled module is used when it imports; setting the environment
variable ``IRS_TT_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _pykernels

RAN_OUT = _pykernels.RAN_OUT
CONVERGED = _pykernels.CONVERGED
DIVERGED = _pykernels.DIVERGED

_available = {"python": _pykernels}
try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    _available["cython"] = _ckernels

if os.environ.get("IRS_TT_PURE_PYTHON", "").strip() not in ("", "0"):
    BACKEND = "python"
else:
    BACKEND = "cython" if _ckernels is not None else "python"


def available_backends():
    return sorted(_available)


def get_backend(name=None):
    """Kernel module by name (``"cython"`` or ``"python"``); default is :data:`BACKEND`."""
    name = name or BACKEND
    try:
        return _available[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {available_backends()}") from None
