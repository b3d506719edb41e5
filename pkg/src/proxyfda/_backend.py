"""Pick the compiled kernels when available, the pure-Python ones otherwise.

Set ``PROXYFDA_BACKEND=python`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

NAME = "python"
kernels = _kernels_py

if os.environ.get("PROXYFDA_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        kernels = _compiled
        NAME = "cython"

transport_simplex = kernels.transport_simplex
mining_scores = kernels.mining_scores
sinkhorn_log = kernels.sinkhorn_log
