"""Quadrature rules on the reference triangle and the unit interval.

Rules are constructed from Gauss-Legendre points (collapsed-square map for
the triangle), so exactness for any requested polynomial degree is available;
the element maps being affine, the degree requested by callers is the total
degree of the physical integrand.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def _gauss01(n):
    # Gauss-Legendre on [0, 1]
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def edge_rule(degree):
    """Rule on [0, 1] exact for polynomials up to ``degree``.

    Returns (points, weights); weights sum to 1.
    """
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    n = degree // 2 + 1
    t, w = _gauss01(n)
    t.flags.writeable = False
    w.flags.writeable = False
    return t, w


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Rule on the reference triangle {x, y >= 0, x + y <= 1}.

    Exact for total degree up to ``degree``; built by collapsing a
    Gauss-Legendre product rule, x = u, y = v (1 - u), with the Jacobian
    (1 - u) folded into the weights.  Weights sum to 1/2.

    Returns (points, weights) with points of shape (n, 2).
    """
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    nu = (degree + 1) // 2 + 1  # u-degree rises by one from the Jacobian
    nv = degree // 2 + 1
    u, wu = _gauss01(nu)
    v, wv = _gauss01(nv)
    U, V = np.meshgrid(u, v, indexing="ij")
    x = U.ravel()
    y = (V * (1.0 - U)).ravel()
    w = (np.outer(wu * (1.0 - u), wv)).ravel()
    pts = np.column_stack([x, y])
    pts.flags.writeable = False
    w.flags.writeable = False
    return pts, w


def map_to_triangle(points, v0, v1, v2):
    """Map reference points into the physical triangle (v0, v1, v2)."""
    points = np.asarray(points)
    v0 = np.asarray(v0, dtype=float)
    j = np.column_stack([np.asarray(v1, dtype=float) - v0,
                         np.asarray(v2, dtype=float) - v0])
    return v0 + points @ j.T
