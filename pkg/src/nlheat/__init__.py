"""Heat kernels of fractional Laplacians under non-local perturbations.

Numerically constructs the fundamental solution of the operator that adds a
state-dependent beta-stable jump component to the fractional Laplacian, and
cross-checks every computable claim about it (semigroup laws, mass
conservation, positivity, scaling, two-sided envelopes) against Fourier and
Monte Carlo oracles.
"""

from .grids import KernelField, SeriesReport, SpaceTimeGrid
from .mc import PathEnsemble, SimConfig, sample_stable_increment, simulate_sde
from .operator import BFunction, TailStats, normalizing_constant, preset
from .params import ComparisonWeight, ModelParams
from .series import SeriesDivergence, default_grid, sum_series
from .stable import StableProfile, eval_p0, eval_pa

__all__ = [
    "BFunction",
    "ComparisonWeight",
    "KernelField",
    "ModelParams",
    "PathEnsemble",
    "SeriesDivergence",
    "SeriesReport",
    "SimConfig",
    "SpaceTimeGrid",
    "StableProfile",
    "TailStats",
    "default_grid",
    "eval_p0",
    "eval_pa",
    "normalizing_constant",
    "preset",
    "sample_stable_increment",
    "simulate_sde",
    "sum_series",
]

__version__ = "0.1.0"
