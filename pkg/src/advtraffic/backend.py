"""Backend selection for the simulation kernels.

The compiled extension is preferred; the pure-numpy module is a drop-in
fallback. Set ADVTRAFFIC_PURE_PYTHON=1 to force the fallback (used by the
backend benchmark and the parity tests).
"""

import os

from advtraffic import _kernels_py

if os.environ.get("ADVTRAFFIC_PURE_PYTHON", "") == "1":
    kernels = _kernels_py
    BACKEND = "python"
else:
    try:
        from advtraffic import _kernels as kernels  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        kernels = _kernels_py
        BACKEND = "python"


def backend_name() -> str:
    return BACKEND
