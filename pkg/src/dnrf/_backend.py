"""Kernel backend selection.

The compiled extension is used when it imports cleanly. Setting
``DNRF_PURE_PYTHON=1`` forces the numpy fallback.
"""

from __future__ import annotations

import os

from . import _fallback as fallback

compiled = None
if not os.environ.get("DNRF_PURE_PYTHON"):
    try:
        from . import _core as compiled
    except ImportError:  # extension not built
        compiled = None

kernels = compiled if compiled is not None else fallback
BACKEND = kernels.NAME


def set_num_threads(n: int) -> None:
    fallback.set_num_threads(n)
    if compiled is not None:
        compiled.set_num_threads(n)
