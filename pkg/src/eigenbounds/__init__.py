"""Guaranteed two-sided eigenvalue bounds by conforming finite elements.

Upper bounds come from the Galerkin method; lower bounds from explicit
formulas fed by equilibrated-flux a posteriori estimates of the eigenpair
residuals.
"""

from .mesh import (DIRICHLET, Mesh, MeshError, bisect, build_mesh,
                   classify_vertices, polygon_contains, read_mesh,
                   uniform_refine, vertex_patch, write_mesh)
from .problem import (BoundarySegment, ProblemError, ProblemSpec, Region,
                      load_problem, problem_from_dict)
from .quadrature import edge_rule, triangle_rule

__all__ = [
    "DIRICHLET", "Mesh", "MeshError", "bisect", "build_mesh",
    "classify_vertices", "polygon_contains", "read_mesh", "uniform_refine",
    "vertex_patch", "write_mesh",
    "BoundarySegment", "ProblemError", "ProblemSpec", "Region",
    "load_problem", "problem_from_dict",
    "edge_rule", "triangle_rule",
]
