"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``ROMFAC_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

COMPILED = False

if os.environ.get("ROMFAC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        COMPILED = True
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

encode_observations = _impl.encode_observations
adversarial_backup = _impl.adversarial_backup

BACKEND = "cython" if COMPILED else "python"
