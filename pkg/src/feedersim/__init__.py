"""Quasi-steady-state co-simulation of radial distribution feeders whose
residential air conditioners provide frequency regulation.

Subpackages split along the problem's seams: `netmodel` (feeder schema and
synthetic populator), `powerflow` (per-phase radial sweep plus the
closed-form line voltage and its sensitivities), `hvac` (two-temperature
house model), `dispatch` (broadcast probabilistic control), `transformer`
(thermal aging), `monitor` (constraint logs), `engine` (scenario and study
orchestration), `results` (artifact emission), and `cli`.  Hot kernels live
in `_kernels` with a compiled core and a numpy fallback.
"""

__version__ = "0.1.0"

from feedersim._kernels import BACKEND as kernel_backend  # noqa: F401
