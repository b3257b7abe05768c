"""Finitely supported probability measures evolved through particle lifts.

The package represents measures with rational weights as integer
multiplicity vectors over a canonical atom list, computes exact quadratic
and bottleneck transport distances between them, and runs implicit,
explicit, and resolvent-power time stepping for velocity fields and
energy functionals that act on the particle lift.
"""

__version__ = "0.1.0"

from wflow.measures import (
    Coupling,
    DiscreteMeasure,
    LagrangianVector,
    MeasureError,
)
from wflow.transport import TransportError, w2_exact, w_infinity

__all__ = [
    "Coupling",
    "DiscreteMeasure",
    "LagrangianVector",
    "MeasureError",
    "TransportError",
    "w2_exact",
    "w_infinity",
    "__version__",
]
