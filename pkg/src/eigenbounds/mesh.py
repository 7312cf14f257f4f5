"""Conforming triangle meshes with newest-vertex bisection refinement.

A mesh carries positively oriented triangles, per-triangle region ids and
refinement state (refinement-edge index and generation counter), and boundary
edge tags.  Tags are integers: ``DIRICHLET`` (-1) for Dirichlet sides,
``k >= 0`` for the k-th Neumann polygon side.

Meshes are treated as immutable; refinement returns a new mesh.
"""

from __future__ import annotations

import math

import numpy as np

DIRICHLET = -1

_EPS = 1e-12


class MeshError(Exception):
    pass


def _signed_area(polygon):
    x = polygon[:, 0]
    y = polygon[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def _segments_properly_intersect(p1, p2, q1, q2):
    # proper or touching intersection of open segments sharing no endpoint
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)):
        return True

    def on_segment(a, b, c):
        return (orient(a, b, c) == 0
                and min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
                and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    return (on_segment(q1, q2, p1) or on_segment(q1, q2, p2)
            or on_segment(p1, p2, q1) or on_segment(p1, p2, q2))


def polygon_contains(polygon, points, tol=0.0):
    """Even-odd containment test; ``tol`` admits points near the boundary."""
    polygon = np.asarray(polygon, dtype=float)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(polygon)
    inside = np.zeros(len(points), dtype=bool)
    x, y = points[:, 0], points[:, 1]
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < np.where(crosses, xint, np.inf))
    if tol > 0.0:
        near = np.zeros(len(points), dtype=bool)
        for i in range(n):
            a = polygon[i]
            b = polygon[(i + 1) % n]
            ab = b - a
            t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
            proj = a + t[:, None] * ab
            near |= np.hypot(*(points - proj).T) <= tol
        inside |= near
    return inside


def _validate_polygon(polygon):
    if polygon.ndim != 2 or polygon.shape[1] != 2 or len(polygon) < 3:
        raise MeshError("polygon needs at least 3 planar vertices")
    if not np.all(np.isfinite(polygon)):
        raise MeshError("polygon has non-finite coordinates")
    diam = max(np.ptp(polygon[:, 0]), np.ptp(polygon[:, 1]))
    n = len(polygon)
    for i in range(n):
        if np.hypot(*(polygon[i] - polygon[(i + 1) % n])) <= _EPS * diam:
            raise MeshError("polygon has a degenerate side")
    if abs(_signed_area(polygon)) <= _EPS * diam * diam:
        raise MeshError("polygon has zero area")
    for i in range(n):
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_properly_intersect(polygon[i], polygon[(i + 1) % n],
                                            polygon[j], polygon[(j + 1) % n]):
                raise MeshError("polygon is self-intersecting")


class Mesh:
    """Triangulation with refinement state.

    Parameters
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array
        Vertex index triples, positively oriented.
    regions : (nt,) int array
        Region id per triangle.
    boundary : dict
        Maps sorted boundary vertex pairs ``(i, j)`` to an integer tag,
        ``DIRICHLET`` or a Neumann side index.
    ref_edge : (nt,) int array, optional
        Local index k of the refinement edge (the edge opposite local
        vertex k).  Defaults to the longest edge, ties broken by the
        smallest opposite global vertex index.
    generation : (nt,) int array, optional
        Bisection depth, 0 on construction.
    """

    def __init__(self, vertices, triangles, regions, boundary,
                 ref_edge=None, generation=None, bisection_parents=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        self.regions = np.ascontiguousarray(regions, dtype=np.int64)
        self.boundary = dict(boundary)
        nt = len(self.triangles)
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be index triples")
        if len(self.regions) != nt:
            raise MeshError("one region id per triangle required")
        if ref_edge is None:
            ref_edge = self._longest_edge_labels()
        self.ref_edge = np.ascontiguousarray(ref_edge, dtype=np.int64)
        if generation is None:
            generation = np.zeros(nt, dtype=np.int64)
        self.generation = np.ascontiguousarray(generation, dtype=np.int64)
        # vertices created by the bisect() call that produced this mesh,
        # rows (new vertex, parent edge endpoint a, endpoint b)
        self.bisection_parents = (np.zeros((0, 3), dtype=np.int64)
                                  if bisection_parents is None
                                  else np.asarray(bisection_parents,
                                                  dtype=np.int64))
        for arr in (self.vertices, self.triangles, self.regions,
                    self.ref_edge, self.generation, self.bisection_parents):
            arr.flags.writeable = False
        self._cache = {}
        self._check_basic()

    # -- construction-time validation ------------------------------------

    def _check_basic(self):
        nv = len(self.vertices)
        t = self.triangles
        if len(t) == 0:
            raise MeshError("empty mesh")
        if t.min() < 0 or t.max() >= nv:
            raise MeshError("triangle vertex index out of range")
        if np.any(self.signed_areas() <= 0.0):
            raise MeshError("triangle with nonpositive orientation")
        counts = self._edge_counts()
        if counts.max() > 2:
            raise MeshError("edge shared by more than two triangles")
        actual = {tuple(e) for e in self.edges[counts == 1]}
        tagged = {tuple(sorted(e)) for e in self.boundary}
        if actual != tagged:
            raise MeshError("boundary tags do not match the mesh boundary")

    def _longest_edge_labels(self):
        v = self.vertices
        t = self.triangles
        lengths = np.stack([
            np.hypot(*(v[t[:, (k + 1) % 3]] - v[t[:, (k + 2) % 3]]).T)
            for k in range(3)
        ], axis=1)
        # ties: smallest opposite global vertex index among maximal edges
        best = lengths.max(axis=1, keepdims=True)
        opp = np.where(lengths >= best, t, np.iinfo(np.int64).max)
        return np.argmin(opp, axis=1)

    # -- derived structures, cached ---------------------------------------

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    def signed_areas(self):
        if "areas" not in self._cache:
            v = self.vertices
            t = self.triangles
            d1 = v[t[:, 1]] - v[t[:, 0]]
            d2 = v[t[:, 2]] - v[t[:, 0]]
            self._cache["areas"] = 0.5 * (d1[:, 0] * d2[:, 1]
                                          - d1[:, 1] * d2[:, 0])
        return self._cache["areas"]

    def areas(self):
        return self.signed_areas()

    def diameters(self):
        if "diam" not in self._cache:
            v = self.vertices
            t = self.triangles
            ls = [np.hypot(*(v[t[:, (k + 1) % 3]] - v[t[:, (k + 2) % 3]]).T)
                  for k in range(3)]
            self._cache["diam"] = np.max(ls, axis=0)
        return self._cache["diam"]

    def min_angle(self):
        """Smallest interior angle over all triangles, in radians."""
        v = self.vertices
        t = self.triangles
        worst = np.inf
        for k in range(3):
            a = v[t[:, k]]
            b = v[t[:, (k + 1) % 3]]
            c = v[t[:, (k + 2) % 3]]
            u1 = b - a
            u2 = c - a
            cosang = np.sum(u1 * u2, axis=1) / (
                np.hypot(*u1.T) * np.hypot(*u2.T))
            worst = min(worst, np.arccos(np.clip(cosang, -1, 1)).min())
        return worst

    def _edge_table(self):
        """edges (ne, 2) sorted pairs in lexical order; tri_edges (nt, 3)
        with entry k the edge id opposite local vertex k."""
        if "edges" not in self._cache:
            t = self.triangles
            nv = self.num_vertices
            pairs = np.stack([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]],
                             axis=1).reshape(-1, 2)
            pairs.sort(axis=1)
            keys = pairs[:, 0] * nv + pairs[:, 1]
            uniq, inv = np.unique(keys, return_inverse=True)
            edges = np.column_stack([uniq // nv, uniq % nv])
            self._cache["edges"] = edges
            self._cache["tri_edges"] = inv.reshape(-1, 3)
        return self._cache["edges"], self._cache["tri_edges"]

    @property
    def edges(self):
        return self._edge_table()[0]

    @property
    def tri_edges(self):
        return self._edge_table()[1]

    def _edge_counts(self):
        if "edge_counts" not in self._cache:
            _, tri_edges = self._edge_table()
            self._cache["edge_counts"] = np.bincount(
                tri_edges.ravel(), minlength=len(self.edges))
        return self._cache["edge_counts"]

    def edge_tags(self):
        """Tag per edge id: DIRICHLET, Neumann side >= 0, or -2 interior."""
        if "edge_tags" not in self._cache:
            edges, _ = self._edge_table()
            nv = self.num_vertices
            tags = np.full(len(edges), -2, dtype=np.int64)
            if self.boundary:
                b = np.array([sorted(e) for e in self.boundary],
                             dtype=np.int64)
                vals = np.array(list(self.boundary.values()), dtype=np.int64)
                keys = edges[:, 0] * nv + edges[:, 1]
                pos = np.searchsorted(keys, b[:, 0] * nv + b[:, 1])
                tags[pos] = vals
            self._cache["edge_tags"] = tags
        return self._cache["edge_tags"]

    def vertex_to_triangles(self):
        """CSR-style adjacency: (offsets, tri_ids), tri ids ascending."""
        if "v2t" not in self._cache:
            t = self.triangles
            order = np.argsort(t.ravel(), kind="stable")
            tri_ids = order // 3
            counts = np.bincount(t.ravel(), minlength=self.num_vertices)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            self._cache["v2t"] = (offsets, tri_ids)
        return self._cache["v2t"]

    def triangles_at(self, vertex):
        offsets, tri_ids = self.vertex_to_triangles()
        return tri_ids[offsets[vertex]:offsets[vertex + 1]]


# -- initial triangulation -------------------------------------------------


def _is_rectilinear(polygon):
    n = len(polygon)
    for i in range(n):
        d = polygon[(i + 1) % n] - polygon[i]
        if d[0] != 0.0 and d[1] != 0.0:
            return False
    return True


def _grid_lines(coords, target):
    coords = np.unique(coords)
    out = [coords[0]]
    for a, b in zip(coords[:-1], coords[1:]):
        pieces = max(1, int(math.ceil((b - a) / target - 1e-9)))
        for k in range(1, pieces):
            out.append(a + (b - a) * k / pieces)
        out.append(b)
    return np.array(out)


def _triangulate_rectilinear(polygon):
    xs = np.unique(polygon[:, 0])
    ys = np.unique(polygon[:, 1])
    gmin = min(np.diff(xs).min(), np.diff(ys).min())
    span = max(xs[-1] - xs[0], ys[-1] - ys[0])
    target = max(3.0 * gmin, span / 48.0)
    xs = _grid_lines(xs, target)
    ys = _grid_lines(ys, target)
    nx, ny = len(xs), len(ys)
    cx, cy = np.meshgrid(0.5 * (xs[:-1] + xs[1:]), 0.5 * (ys[:-1] + ys[1:]),
                         indexing="ij")
    keep = polygon_contains(polygon, np.column_stack([cx.ravel(), cy.ravel()]))
    keep = keep.reshape(nx - 1, ny - 1)

    vid = -np.ones((nx, ny), dtype=np.int64)
    vertices = []
    triangles = []

    def corner(i, j):
        if vid[i, j] < 0:
            vid[i, j] = len(vertices)
            vertices.append((xs[i], ys[j]))
        return vid[i, j]

    for i in range(nx - 1):
        for j in range(ny - 1):
            if not keep[i, j]:
                continue
            v00 = corner(i, j)
            v10 = corner(i + 1, j)
            v11 = corner(i + 1, j + 1)
            v01 = corner(i, j + 1)
            triangles.append((v00, v10, v11))
            triangles.append((v00, v11, v01))
    if not triangles:
        raise MeshError("no grid cell lies inside the polygon")
    return np.array(vertices, dtype=float), np.array(triangles,
                                                     dtype=np.int64)


def _triangulate_earclip(polygon):
    n = len(polygon)
    idx = list(range(n))
    triangles = []

    def cross(o, a, b):
        return ((polygon[a, 0] - polygon[o, 0])
                * (polygon[b, 1] - polygon[o, 1])
                - (polygon[a, 1] - polygon[o, 1])
                * (polygon[b, 0] - polygon[o, 0]))

    def in_triangle(p, a, b, c):
        d1 = cross(a, b, p)
        d2 = cross(b, c, p)
        d3 = cross(c, a, p)
        return d1 >= 0 and d2 >= 0 and d3 >= 0

    guard = 0
    while len(idx) > 3:
        guard += 1
        if guard > 4 * n * n:
            raise MeshError("ear clipping failed; polygon may be invalid")
        clipped = False
        for pos in range(len(idx)):
            a = idx[pos - 1]
            b = idx[pos]
            c = idx[(pos + 1) % len(idx)]
            if cross(a, b, c) <= 0:
                continue
            if any(in_triangle(p, a, b, c)
                   for p in idx if p not in (a, b, c)):
                continue
            triangles.append((a, b, c))
            idx.pop(pos)
            clipped = True
            break
        if not clipped:
            raise MeshError("no ear found; polygon may be degenerate")
    triangles.append(tuple(idx))
    return polygon.copy(), np.array(triangles, dtype=np.int64)


def _assign_boundary_tags(vertices, triangles, polygon, side_tags):
    # boundary edges = edges adjacent to exactly one triangle
    nv = len(vertices)
    pairs = np.concatenate([triangles[:, [1, 2]], triangles[:, [2, 0]],
                            triangles[:, [0, 1]]])
    pairs = np.sort(pairs, axis=1)
    keys = pairs[:, 0] * nv + pairs[:, 1]
    uniq, counts = np.unique(keys, return_counts=True)
    bkeys = uniq[counts == 1]
    diam = max(np.ptp(polygon[:, 0]), np.ptp(polygon[:, 1]))
    tol = 1e-9 * diam
    n = len(polygon)
    boundary = {}
    for key in bkeys:
        i, j = int(key // nv), int(key % nv)
        mid = 0.5 * (vertices[i] + vertices[j])
        tag = None
        for s in range(n):
            a = polygon[s]
            b = polygon[(s + 1) % n]
            ab = b - a
            l2 = ab @ ab
            t = ((mid - a) @ ab) / l2
            if -1e-12 <= t <= 1 + 1e-12:
                dist = abs((mid[0] - a[0]) * ab[1] - (mid[1] - a[1]) * ab[0])
                if dist <= tol * math.sqrt(l2):
                    tag = side_tags[s]
                    break
        if tag is None:
            raise MeshError("boundary edge not on any polygon side")
        boundary[(i, j)] = int(tag)
    return boundary


def build_mesh(polygon, side_tags=None):
    """Triangulate a simple polygon.

    Parameters
    ----------
    polygon : (n, 2) array
        Vertices of a simple polygon, either orientation.
    side_tags : sequence of int, optional
        Tag for side i (vertex i to vertex i+1): ``DIRICHLET`` or a
        Neumann side index.  Defaults to all Dirichlet.

    Returns
    -------
    Mesh
        Conforming triangulation, region id 0 everywhere.  Rectilinear
        polygons are gridded by the axis lines through their coordinates
        (long intervals subdivided to cap cell aspect ratio); other simple
        polygons are ear-clipped without interior vertices.
    """
    polygon = np.asarray(polygon, dtype=float)
    _validate_polygon(polygon)
    if side_tags is None:
        side_tags = [DIRICHLET] * len(polygon)
    side_tags = list(side_tags)
    if len(side_tags) != len(polygon):
        raise MeshError("one tag per polygon side required")
    if _signed_area(polygon) < 0.0:
        # normalize to counterclockwise; side i = (v_i, v_{i+1}) keeps its
        # tag under the index remap of the reversal
        n = len(polygon)
        polygon = polygon[::-1].copy()
        side_tags = [side_tags[(n - 1 - i) % n] for i in range(n)]
        side_tags = side_tags[-1:] + side_tags[:-1]
    if _is_rectilinear(polygon):
        vertices, triangles = _triangulate_rectilinear(polygon)
    else:
        vertices, triangles = _triangulate_earclip(polygon)
    boundary = _assign_boundary_tags(vertices, triangles, polygon, side_tags)
    return Mesh(vertices, triangles, np.zeros(len(triangles), dtype=np.int64),
                boundary)


# -- newest-vertex bisection ------------------------------------------------


def bisect(mesh, marked):
    """Bisect the marked triangles, with conformity closure.

    Newest-vertex bisection in cut-edge form: the refinement edges of all
    marked triangles are cut; closure cuts the refinement edge of every
    triangle that has any cut edge; each triangle is then split through its
    refinement edge into 2, 3 or 4 children.  New vertices appear in both
    neighbours, so the result is conforming.

    Returns the refined mesh.  Marked triangles gain at least one
    generation; an empty marked set returns the mesh unchanged.
    """
    marked = np.unique(np.asarray(list(marked), dtype=np.int64))
    if marked.size == 0:
        return mesh
    nt = mesh.num_triangles
    if marked.min() < 0 or marked.max() >= nt:
        raise MeshError("marked element id out of range")

    edges, tri_edges = mesh._edge_table()
    ne = len(edges)
    idx = np.arange(nt)
    k = mesh.ref_edge
    ref_eid = tri_edges[idx, k]
    cut = np.zeros(ne, dtype=bool)
    cut[ref_eid[marked]] = True
    while True:
        need = cut[tri_edges].any(axis=1) & ~cut[ref_eid]
        if not need.any():
            break
        cut[ref_eid[need]] = True

    nv = mesh.num_vertices
    cut_ids = np.flatnonzero(cut)
    mid_of = np.full(ne, -1, dtype=np.int64)
    mid_of[cut_ids] = nv + np.arange(len(cut_ids))
    new_pts = 0.5 * (mesh.vertices[edges[cut_ids, 0]]
                     + mesh.vertices[edges[cut_ids, 1]])
    vertices = np.vstack([mesh.vertices, new_pts])
    parents = np.column_stack([mid_of[cut_ids], edges[cut_ids, 0],
                               edges[cut_ids, 1]])

    t = mesh.triangles
    c = t[idx, k]
    a = t[idx, (k + 1) % 3]
    b = t[idx, (k + 2) % 3]
    e_ca = tri_edges[idx, (k + 2) % 3]  # edge (c, a), opposite b
    e_bc = tri_edges[idx, (k + 1) % 3]  # edge (b, c), opposite a
    split = cut[ref_eid]
    cut_ca = split & cut[e_ca]
    cut_bc = split & cut[e_bc]

    counts = np.where(split, 2 + cut_ca + cut_bc, 1)
    offs = np.concatenate([[0], np.cumsum(counts)])[:-1]
    total = int(counts.sum())
    new_t = np.empty((total, 3), dtype=np.int64)
    new_ref = np.full(total, 2, dtype=np.int64)
    new_gen = np.empty(total, dtype=np.int64)
    new_reg = np.empty(total, dtype=np.int64)

    keep = ~split
    new_t[offs[keep]] = t[keep]
    new_ref[offs[keep]] = mesh.ref_edge[keep]
    new_gen[offs[keep]] = mesh.generation[keep]
    new_reg[offs[keep]] = mesh.regions[keep]

    m = mid_of[ref_eid]
    gen1 = mesh.generation + 1

    def put(rows, pos, tri_cols, gen):
        new_t[pos[rows]] = np.column_stack([col[rows] for col in tri_cols])
        new_gen[pos[rows]] = gen[rows]
        new_reg[pos[rows]] = mesh.regions[rows]

    # first child (c, a, m): slot 0; bisected again through (c, a) if cut
    m1 = mid_of[e_ca]
    rows = split & ~cut_ca
    put(rows, offs, (c, a, m), gen1)
    rows = cut_ca
    put(rows, offs, (m, c, m1), gen1 + 1)
    put(rows, offs + 1, (a, m, m1), gen1 + 1)

    # second child (b, c, m): after the first child's slots
    off2 = offs + np.where(cut_ca, 2, 1)
    m2 = mid_of[e_bc]
    rows = split & ~cut_bc
    put(rows, off2, (b, c, m), gen1)
    rows = cut_bc
    put(rows, off2, (m, b, m2), gen1 + 1)
    put(rows, off2 + 1, (c, m, m2), gen1 + 1)

    boundary = {}
    for (i, j), tag in mesh.boundary.items():
        i, j = (i, j) if i < j else (j, i)
        key = np.searchsorted(edges[:, 0] * nv + edges[:, 1], i * nv + j)
        mid = mid_of[key]
        if mid < 0:
            boundary[(i, j)] = tag
        else:
            boundary[(i, int(mid))] = tag
            boundary[(j, int(mid))] = tag

    return Mesh(vertices, new_t, new_reg, boundary, ref_edge=new_ref,
                generation=new_gen, bisection_parents=parents)


def uniform_refine(mesh, times=1):
    """Bisect every triangle, ``times`` passes."""
    for _ in range(times):
        mesh = bisect(mesh, np.arange(mesh.num_triangles))
    return mesh


# -- vertex classification and patches --------------------------------------

INTERIOR_VERTEX = 0
NEUMANN_VERTEX = 1
DIRICHLET_VERTEX = 2


class VertexClasses:
    """Vertex partition: interior, Neumann boundary, Dirichlet boundary.

    A vertex lying on the closure of the Dirichlet boundary is Dirichlet
    even if it also touches Neumann sides.
    """

    def __init__(self, kinds):
        self.kinds = kinds

    @property
    def interior(self):
        return np.flatnonzero(self.kinds == INTERIOR_VERTEX)

    @property
    def neumann(self):
        return np.flatnonzero(self.kinds == NEUMANN_VERTEX)

    @property
    def dirichlet(self):
        return np.flatnonzero(self.kinds == DIRICHLET_VERTEX)


def classify_vertices(mesh):
    kinds = np.zeros(mesh.num_vertices, dtype=np.int8)
    for (i, j), tag in mesh.boundary.items():
        which = DIRICHLET_VERTEX if tag == DIRICHLET else NEUMANN_VERTEX
        for v in (i, j):
            kinds[v] = max(kinds[v], which)
    return VertexClasses(kinds)


class VertexPatch:
    """Elements sharing a vertex, with its edges classified.

    Attributes
    ----------
    vertex : int
    elements : int array, ascending
    interior_edges : edge ids interior to the patch
    exterior_edges : patch-boundary edge ids not containing the vertex
    dirichlet_edges, neumann_edges : patch-boundary edge ids containing the
        vertex, on the Dirichlet / Neumann boundary
    """

    def __init__(self, vertex, elements, interior_edges, exterior_edges,
                 dirichlet_edges, neumann_edges):
        self.vertex = vertex
        self.elements = elements
        self.interior_edges = interior_edges
        self.exterior_edges = exterior_edges
        self.dirichlet_edges = dirichlet_edges
        self.neumann_edges = neumann_edges


def vertex_patch(mesh, a):
    """Build the patch of vertex ``a`` and check it is edge-connected."""
    elems = mesh.triangles_at(a)
    if elems.size == 0:
        raise MeshError(f"vertex {a} belongs to no triangle")
    tri_edges = mesh.tri_edges[elems]
    eids, counts = np.unique(tri_edges, return_counts=True)
    edges = mesh.edges
    tags = mesh.edge_tags()
    interior = eids[counts == 2]
    boundary_eids = eids[counts == 1]
    contains_a = (edges[boundary_eids, 0] == a) | (edges[boundary_eids, 1] == a)
    ext = boundary_eids[~contains_a]
    own = boundary_eids[contains_a]
    if np.any(tags[own] == -2):
        raise MeshError(f"patch of vertex {a} is not edge-connected")
    dirich = own[tags[own] == DIRICHLET]
    neum = own[tags[own] >= 0]

    # edge-connectivity sweep over shared edges
    seen = {int(elems[0])}
    frontier = [int(elems[0])]
    by_edge = {}
    for row, t in zip(tri_edges, elems):
        for e in row:
            by_edge.setdefault(int(e), []).append(int(t))
    while frontier:
        t = frontier.pop()
        pos = np.flatnonzero(elems == t)[0]
        for e in tri_edges[pos]:
            for other in by_edge[int(e)]:
                if other not in seen:
                    seen.add(other)
                    frontier.append(other)
    if len(seen) != len(elems):
        raise MeshError(f"patch of vertex {a} is not edge-connected")
    return VertexPatch(int(a), elems, interior, ext, dirich, neum)


# -- file I/O ----------------------------------------------------------------


def write_mesh(mesh, path):
    """Plain-text mesh format; coordinates keep full double precision."""
    lines = [f"vertices {mesh.num_vertices}"]
    for x, y in mesh.vertices:
        lines.append(f"{x:.17g} {y:.17g}")
    lines.append(f"triangles {mesh.num_triangles}")
    for (i, j, k), r in zip(mesh.triangles, mesh.regions):
        lines.append(f"{i} {j} {k} {r}")
    items = sorted((min(e), max(e), tag) for e, tag in mesh.boundary.items())
    lines.append(f"boundary {len(items)}")
    for i, j, tag in items:
        lines.append(f"{i} {j} {tag}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path):
    with open(path) as fh:
        tokens = fh.read().split()
    pos = 0

    def take(n):
        nonlocal pos
        out = tokens[pos:pos + n]
        if len(out) != n:
            raise MeshError("truncated mesh file")
        pos += n
        return out

    def section(name):
        head = take(2)
        if head[0] != name:
            raise MeshError(f"expected section {name!r}, got {head[0]!r}")
        return int(head[1])

    nv = section("vertices")
    vertices = np.array([float(x) for x in take(2 * nv)]).reshape(nv, 2)
    nt = section("triangles")
    tdata = np.array([int(x) for x in take(4 * nt)], dtype=np.int64)
    tdata = tdata.reshape(nt, 4)
    nb = section("boundary")
    bdata = [take(3) for _ in range(nb)]
    if pos != len(tokens):
        raise MeshError("trailing data in mesh file")
    boundary = {}
    for i, j, tag in bdata:
        key = tuple(sorted((int(i), int(j))))
        if key in boundary:
            raise MeshError("duplicate boundary edge")
        boundary[key] = int(tag)
    return Mesh(vertices, tdata[:, :3], tdata[:, 3], boundary)
