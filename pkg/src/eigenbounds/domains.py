"""Benchmark polygons: unit square, rectangle, dumbbell and its homotopy chain.

The chain interpolates between the rectangle (0, 9pi/4) x (0, pi), whose
Dirichlet Laplacian spectrum is known in closed form, and the dumbbell of two
pi x pi squares joined by a pi/4 x pi/4 neck.  Stage m narrows the neck to
(3m pi/32, pi - 3m pi/32); stage 0 is the rectangle, stage 4 the dumbbell.
"""

import math

import numpy as np

PI = math.pi


def unit_square():
    return np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def rectangle(width, height):
    return np.array([[0.0, 0.0], [width, 0.0], [width, height],
                     [0.0, height]])


def homotopy_polygon(m):
    """Stage-m domain of the dumbbell homotopy chain, 0 <= m <= 4."""
    if not 0 <= m <= 4:
        raise ValueError("homotopy stage must be in 0..4")
    if m == 0:
        return rectangle(2.25 * PI, PI)
    y1 = 3 * m * PI / 32
    y2 = PI - y1
    x1 = PI
    x2 = 1.25 * PI
    x3 = 2.25 * PI
    return np.array([
        [0.0, 0.0], [x1, 0.0], [x1, y1], [x2, y1], [x2, 0.0], [x3, 0.0],
        [x3, PI], [x2, PI], [x2, y2], [x1, y2], [x1, PI], [0.0, PI],
    ])


def dumbbell_polygon():
    """Two pi x pi squares joined by a pi/4 x pi/4 neck."""
    return homotopy_polygon(4)
