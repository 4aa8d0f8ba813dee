"""Numerical laboratory for the open KPZ equation on an interval.

Submodules
----------
grid_paths        grids, paths, seeded streams and Brownian samplers
robin_heat        Robin heat kernel via eigenfunction expansion
gibbs_stationary  two-layer Gibbs sampler for the stationary measures
sigma_variance    sigma_L^2 estimators and scaling fits
she_solver        finite-difference stochastic heat equation
wedge_lab         planar Brownian motion in the 2pi/3 wedge
orchestrator      configuration, dispatch, worker pools and result files
acceptance        acceptance checks with fixed tolerances
cli               the ``openkpz`` command
"""

from .errors import CalibrationError, InputError, NumericalError, OpenKPZError
from .grid_paths import Grid, Path, RngStream

__version__ = "0.1.0"

__all__ = [
    "CalibrationError",
    "Grid",
    "InputError",
    "NumericalError",
    "OpenKPZError",
    "Path",
    "RngStream",
    "__version__",
]
