"""Backend selection for the dense-layer kernels.

The compiled extension ``dpfed._core`` is used when it imports; otherwise the
numpy fallback is used. Set ``DPFED_BACKEND=python`` to force the fallback.
Both backends produce bitwise-identical results.
"""
from __future__ import annotations

import os

from dpfed import _fallback

BACKEND: str

if os.environ.get("DPFED_BACKEND", "").lower() == "python":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from dpfed import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

dense_forward = _impl.dense_forward
dense_backward = _impl.dense_backward


def compiled_available() -> bool:
    try:
        from dpfed import _core  # noqa: F401
    except ImportError:
        return False
    return True
