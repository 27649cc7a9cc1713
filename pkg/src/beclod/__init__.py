"""Two-level multiscale solvers for Gross-Pitaevskii ground states and dynamics.

The package builds localized orthogonal decomposition (LOD) spaces on
simplicial box meshes, assembles the sparse three-valence interaction tensor
of the LOD basis, computes ground states by damped inverse iteration, and
integrates the time-dependent equation with energy-conserving continuous
Galerkin collocation schemes.
"""

__version__ = "0.1.0"
