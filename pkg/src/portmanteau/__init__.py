"""Mixed Poisson and Gaussian approximation bounds on the Poisson space.

Modules
-------
poisson_space   control measures, configurations, seeded replicate streams
kernel_algebra  symmetric kernels on finite cell spaces and their contractions
chaos           multiple integrals, U-statistics, chaos expansions, D and DL^{-1}
stein           Chen-Stein and Gaussian Stein equation solvers, bound constants
bounds          Monte Carlo estimates of the bound coefficients and diagnostics
distances       total variation, Wasserstein and a mixed-law dictionary surrogate
geomgraph       disk graphs, induced subgraph counts and the mixed regime experiment
cli             batch runner
"""
from importlib import metadata as _metadata

try:
    __version__ = _metadata.version("artifact")
except _metadata.PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
