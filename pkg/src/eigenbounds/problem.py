"""Problem data: polygonal geometry, boundary segments, coefficients.

The eigenvalue problem is

    -div(A grad u) + c u = lambda beta1 u   in the polygon,
    (A grad u) . n + alpha u = lambda beta2 u   on Neumann sides,
    u = 0                                       on Dirichlet sides,

with A, c, beta1 constant per region and alpha, beta2 constant per Neumann
side.  Problem files are TOML; see ``load_problem``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .mesh import DIRICHLET


class ProblemError(Exception):
    pass


@dataclass(frozen=True)
class Region:
    """Per-region coefficients: diffusion matrix A, reaction c, weight beta1."""

    a_matrix: np.ndarray
    c: float = 0.0
    beta1: float = 1.0

    def __post_init__(self):
        a = np.asarray(self.a_matrix, dtype=float)
        if a.shape != (2, 2):
            raise ProblemError("A must be a 2x2 matrix")
        if not np.allclose(a, a.T, rtol=0.0, atol=1e-14 * abs(a).max()):
            raise ProblemError("A must be symmetric")
        if np.linalg.eigvalsh(a)[0] <= 0.0:
            raise ProblemError("A must be positive definite")
        object.__setattr__(self, "a_matrix", a)
        if self.c < 0.0:
            raise ProblemError("c must be nonnegative")
        if self.beta1 < 0.0:
            raise ProblemError("beta1 must be nonnegative")

    @property
    def lambda_min(self):
        """Smallest eigenvalue of A."""
        return float(np.linalg.eigvalsh(self.a_matrix)[0])


@dataclass(frozen=True)
class BoundarySegment:
    """One polygon side: Dirichlet, or Neumann with coefficients alpha, beta2."""

    dirichlet: bool = True
    alpha: float = 0.0
    beta2: float = 0.0

    def __post_init__(self):
        if self.alpha < 0.0 or self.beta2 < 0.0:
            raise ProblemError("alpha and beta2 must be nonnegative")
        if self.dirichlet and (self.alpha != 0.0 or self.beta2 != 0.0):
            raise ProblemError("Dirichlet sides carry no coefficients")


@dataclass
class ProblemSpec:
    """Geometry, boundary segments and coefficients of one eigenproblem.

    ``segments[i]`` describes polygon side i (vertex i to vertex i+1);
    ``regions[k]`` the coefficients of triangles with region id k.
    """

    polygon: np.ndarray
    segments: list = field(default_factory=list)
    regions: list = field(default_factory=lambda: [Region(np.eye(2))])
    degree: int = 1
    label: str = ""

    def __post_init__(self):
        self.polygon = np.asarray(self.polygon, dtype=float)
        if self.polygon.ndim != 2 or self.polygon.shape[1] != 2:
            raise ProblemError("polygon must be an (n, 2) array")
        n = len(self.polygon)
        if not self.segments:
            self.segments = [BoundarySegment()] * n
        if len(self.segments) != n:
            raise ProblemError("one boundary segment per polygon side")
        if not self.regions:
            raise ProblemError("at least one region required")
        if self.degree < 1:
            raise ProblemError("degree must be at least 1")
        has_dirichlet = any(s.dirichlet for s in self.segments)
        if not has_dirichlet and all(r.c == 0.0 for r in self.regions) \
                and all(s.alpha == 0.0 for s in self.segments):
            raise ProblemError("a(.,.) is not coercive: no Dirichlet side, "
                               "c = 0 and alpha = 0 everywhere")
        if all(r.beta1 == 0.0 for r in self.regions) \
                and all(s.beta2 == 0.0 for s in self.segments):
            raise ProblemError("b(.,.) vanishes: beta1 = beta2 = 0")

    def side_tags(self):
        """Mesh boundary tag per polygon side."""
        return [DIRICHLET if s.dirichlet else i
                for i, s in enumerate(self.segments)]

    def region_of(self, region_id):
        try:
            return self.regions[region_id]
        except IndexError:
            raise ProblemError(f"region id {region_id} has no coefficients")

    def segment_of(self, tag):
        if tag == DIRICHLET:
            raise ProblemError("Dirichlet tag has no segment coefficients")
        try:
            return self.segments[tag]
        except IndexError:
            raise ProblemError(f"boundary tag {tag} has no segment")

    # coefficient arrays over a mesh

    def coefficients(self, mesh):
        """Per-triangle A (nt,2,2), c (nt,), beta1 (nt,), lambda_min_A (nt,)."""
        ids = mesh.regions
        amats = np.array([r.a_matrix for r in self.regions])
        cs = np.array([r.c for r in self.regions])
        b1 = np.array([r.beta1 for r in self.regions])
        lmin = np.array([r.lambda_min for r in self.regions])
        if ids.min() < 0 or ids.max() >= len(self.regions):
            raise ProblemError("mesh region id without coefficients")
        return amats[ids], cs[ids], b1[ids], lmin[ids]


def _segments_from_toml(entries, nsides):
    segs = [None] * nsides
    for entry in entries:
        sides = entry.get("sides")
        if sides is None:
            raise ProblemError("boundary entry needs a 'sides' list")
        kind = entry.get("kind", "dirichlet")
        if kind == "dirichlet":
            seg = BoundarySegment()
        elif kind == "neumann":
            seg = BoundarySegment(dirichlet=False,
                                  alpha=float(entry.get("alpha", 0.0)),
                                  beta2=float(entry.get("beta2", 0.0)))
        else:
            raise ProblemError(f"unknown boundary kind {kind!r}")
        for s in sides:
            if not 0 <= s < nsides:
                raise ProblemError(f"side index {s} out of range")
            if segs[s] is not None:
                raise ProblemError(f"side {s} assigned twice")
            segs[s] = seg
    return [s if s is not None else BoundarySegment() for s in segs]


def problem_from_dict(data, label=""):
    geometry = data.get("geometry")
    if geometry is None or "vertices" not in geometry:
        raise ProblemError("problem file needs [geometry] with 'vertices'")
    polygon = np.asarray(geometry["vertices"], dtype=float)
    segments = _segments_from_toml(data.get("boundary", []), len(polygon))
    regions = [Region(np.asarray(r["A"], dtype=float),
                      c=float(r.get("c", 0.0)),
                      beta1=float(r.get("beta1", 1.0)))
               for r in data.get("region", [{"A": np.eye(2)}])]
    return ProblemSpec(polygon, segments, regions,
                       degree=int(data.get("degree", 1)), label=label)


def load_problem(path):
    """Read a TOML problem file into a ProblemSpec."""
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ProblemError(f"{path}: {exc}") from exc
    return problem_from_dict(data, label=str(path))
