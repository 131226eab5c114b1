"""Compiled round kernels with import-time fallback detection.

``kernels`` is the Cython extension when it was built, else None; callers
choose the pure-Python round engine in that case (see engine.resolve_backend).
"""

try:
    from . import _core as kernels  # type: ignore[attr-defined]

    COMPILED_AVAILABLE = True
except ImportError:  # extension not built
    kernels = None
    COMPILED_AVAILABLE = False

__all__ = ["kernels", "COMPILED_AVAILABLE"]
