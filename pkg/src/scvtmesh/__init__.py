"""Spherical centroidal Voronoi tessellation mesh generation.

Lloyd's method, LBFGS, and Lloyd-preconditioned LBFGS over analytic
point-density fields, with cap-parallel spherical Delaunay triangulation,
overlapping domain decomposition, bisection refinement, and mesh quality
reporting.
"""

from .density import DensityField, density_preset
from .geometry import QUADRATURE_RULES, QuadratureRule
from .optimizer import StoppingCriteria, minimize
from .pipeline import MeshEvaluator, RunPlan, bisect, bisection_ladder, run

__version__ = "0.1.0"

__all__ = [
    "DensityField",
    "density_preset",
    "QuadratureRule",
    "QUADRATURE_RULES",
    "StoppingCriteria",
    "minimize",
    "MeshEvaluator",
    "RunPlan",
    "bisect",
    "bisection_ladder",
    "run",
    "__version__",
]
