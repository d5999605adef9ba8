"""Hot simulation kernels with a compiled core and a numpy fallback.

The compiled extension (`_core`, built from Cython) is preferred when it
imports cleanly; otherwise the numpy implementations in `_fallback` are
used.  Set FEEDERSIM_PURE=1 to force the fallback, e.g. for benchmarking
or debugging.  Both backends implement identical semantics.
"""

import os

from feedersim._kernels import _fallback

_impl = _fallback
if os.environ.get("FEEDERSIM_PURE") != "1":
    try:
        from feedersim._kernels import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        pass

BACKEND = "python" if _impl is _fallback else "compiled"

uniform_draws = _impl.uniform_draws
house_step = _impl.house_step
flip_endpoint = _impl.flip_endpoint
xfmr_step = _impl.xfmr_step
sweep_solve = _impl.sweep_solve

__all__ = [
    "BACKEND",
    "uniform_draws",
    "house_step",
    "flip_endpoint",
    "xfmr_step",
    "sweep_solve",
]
