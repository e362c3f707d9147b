"""Pick the compiled kernels when present; ``ENVSYNTH_PURE=1`` forces the fallback."""

from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
if os.environ.get("ENVSYNTH_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels

validate_topology = _impl.validate_topology
enumerate_paths = _impl.enumerate_paths

__all__ = ["BACKEND", "enumerate_paths", "validate_topology"]
