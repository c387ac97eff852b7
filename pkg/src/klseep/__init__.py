"""Simultaneous Bayesian estimation of conductivity fields and embedded geometry
for steady seepage problems.

The field is represented by a truncated Karhunen-Loeve expansion whose integral
eigenvalue problem is solved once on a fixed bounding domain; geometry updates
move the FEM mesh, not the basis. A discrete (per-point covariance) K-L backend
is included as the expensive reference implementation.
"""

__version__ = "0.1.0"

from . import errors  # noqa: F401
