"""Conforming P_p Lagrange spaces and assembly of the bilinear forms.

The forms are

    a(u, v) = (A grad u, grad v) + (c u, v) + (alpha u, v)_GammaN
    b(u, v) = (beta1 u, v) + (beta2 u, v)_GammaN

with piecewise-constant coefficients, so the quadrature degrees used here
make assembly exact.  Dirichlet dofs are eliminated symmetrically.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .mesh import DIRICHLET, DIRICHLET_VERTEX, classify_vertices
from .quadrature import edge_rule, triangle_rule


class AssemblyError(Exception):
    pass


# -- reference element -------------------------------------------------------


def _lattice_nodes(p):
    """Lagrange nodes in local order: vertices, per-edge chains, interior."""
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    nodes = [verts[0], verts[1], verts[2]]
    # edge k runs from local vertex (k+1)%3 to (k+2)%3
    for k in range(3):
        va = verts[(k + 1) % 3]
        vb = verts[(k + 2) % 3]
        for i in range(1, p):
            nodes.append(va + (vb - va) * i / p)
    for i in range(1, p):
        for j in range(1, p - i):
            nodes.append(np.array([i / p, j / p]))
    return np.array(nodes)


@lru_cache(maxsize=None)
def _ref_element(p):
    """Monomial-coefficient representation of the P_p Lagrange basis."""
    nodes = _lattice_nodes(p)
    powers = [(a, b) for total in range(p + 1) for a, b in
              [(total - b2, b2) for b2 in range(total + 1)]]
    v = np.array([[x ** a * y ** b for a, b in powers] for x, y in nodes])
    coeff = np.linalg.inv(v)
    nodes.flags.writeable = False
    coeff.flags.writeable = False
    return nodes, tuple(powers), coeff


def _tabulate(p, points):
    """Values (nq, nloc) and reference gradients (nq, nloc, 2)."""
    _, powers, coeff = _ref_element(p)
    points = np.atleast_2d(points)
    x, y = points[:, 0], points[:, 1]
    mono = np.stack([x ** a * y ** b for a, b in powers], axis=1)
    dmx = np.stack([a * x ** max(a - 1, 0) * y ** b for a, b in powers],
                   axis=1)
    dmy = np.stack([b * x ** a * y ** max(b - 1, 0) for a, b in powers],
                   axis=1)
    phi = mono @ coeff
    dphi = np.stack([dmx @ coeff, dmy @ coeff], axis=2)
    return phi, dphi


@lru_cache(maxsize=None)
def _edge_lagrange(p):
    """1D Lagrange basis at nodes [0, 1, 1/p, ..., (p-1)/p] as coefficients."""
    nodes = np.concatenate([[0.0, 1.0], np.arange(1, p) / p])
    v = np.vander(nodes, p + 1, increasing=True)
    return np.linalg.inv(v)


# -- dof map -----------------------------------------------------------------


@dataclass
class FeSpace:
    """Global Lagrange dof numbering with Dirichlet constraints.

    Dofs are ordered vertices, then (p-1) per edge along the global edge
    direction (lower vertex index to higher), then interior blocks per
    triangle.  ``cell_dofs[t]`` lists the global dofs of triangle t in the
    local node order of the reference element.
    """

    mesh: object
    degree: int
    ndof: int
    cell_dofs: np.ndarray
    dirichlet: np.ndarray  # bool mask
    free: np.ndarray       # indices of unconstrained dofs

    @property
    def num_free(self):
        return len(self.free)

    def expand(self, free_values):
        """Pad free-dof coefficients with zeros on Dirichlet dofs."""
        free_values = np.asarray(free_values)
        out = np.zeros((self.ndof,) + free_values.shape[1:])
        out[self.free] = free_values
        return out

    def node_coordinates(self):
        """Physical coordinates of every global dof's nodal point."""
        mesh = self.mesh
        p = self.degree
        coords = np.zeros((self.ndof, 2))
        nodes = _lattice_nodes(p)
        v = mesh.vertices[mesh.triangles]  # (nt, 3, 2)
        origin = v[:, 0]
        jac = np.stack([v[:, 1] - origin, v[:, 2] - origin], axis=2)
        phys = origin[:, None, :] + np.einsum("tij,nj->tni", jac, nodes)
        flat = self.cell_dofs.ravel()
        coords[flat] = phys.reshape(-1, 2)
        return coords

    def interpolate(self, f):
        """Nodal interpolant of a callable f(x, y)."""
        xy = self.node_coordinates()
        return np.asarray(f(xy[:, 0], xy[:, 1]), dtype=float)


def build_space(mesh, spec):
    """Number the P_p Lagrange dofs of ``mesh`` and mark Dirichlet ones."""
    p = spec.degree
    if p < 1:
        raise AssemblyError("degree must be at least 1")
    nv = mesh.num_vertices
    edges = mesh.edges
    ne = len(edges)
    nt = mesh.num_triangles
    n_int = (p - 1) * (p - 2) // 2
    ndof = nv + ne * (p - 1) + nt * n_int

    nloc = (p + 1) * (p + 2) // 2
    cell = np.empty((nt, nloc), dtype=np.int64)
    cell[:, :3] = mesh.triangles
    if p > 1:
        t = mesh.triangles
        for k in range(3):
            a = t[:, (k + 1) % 3]
            b = t[:, (k + 2) % 3]
            base = nv + mesh.tri_edges[:, k] * (p - 1)
            for i in range(p - 1):
                fwd = base + i
                rev = base + (p - 2 - i)
                cell[:, 3 + k * (p - 1) + i] = np.where(a < b, fwd, rev)
        start = nv + ne * (p - 1)
        interior = start + (np.arange(nt)[:, None] * n_int
                            + np.arange(n_int)[None, :])
        cell[:, 3 + 3 * (p - 1):] = interior

    dirichlet = np.zeros(ndof, dtype=bool)
    classes = classify_vertices(mesh)
    dirichlet[:nv] = classes.kinds == DIRICHLET_VERTEX
    if p > 1:
        tags = mesh.edge_tags()
        for e in np.flatnonzero(tags == DIRICHLET):
            dirichlet[nv + e * (p - 1):nv + (e + 1) * (p - 1)] = True
    free = np.flatnonzero(~dirichlet)
    return FeSpace(mesh, p, ndof, cell, dirichlet, free)


# -- assembly ----------------------------------------------------------------


@dataclass
class AssembledForms:
    """Sparse symmetric operators for a(.,.) and b(.,.).

    ``a`` and ``b`` act on free dofs (Dirichlet rows/columns eliminated);
    ``a_full`` and ``b_full`` keep all Lagrange dofs.
    """

    space: FeSpace
    a: sp.csr_matrix
    b: sp.csr_matrix
    a_full: sp.csr_matrix
    b_full: sp.csr_matrix


def _element_geometry(mesh):
    v = mesh.vertices[mesh.triangles]
    jac = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    inv = np.empty_like(jac)
    inv[:, 0, 0] = jac[:, 1, 1]
    inv[:, 0, 1] = -jac[:, 0, 1]
    inv[:, 1, 0] = -jac[:, 1, 0]
    inv[:, 1, 1] = jac[:, 0, 0]
    inv /= det[:, None, None]
    inv_t = np.swapaxes(inv, 1, 2)
    return jac, det, inv_t


def _scatter(blocks, cell_dofs, ndof):
    nloc = cell_dofs.shape[1]
    rows = np.repeat(cell_dofs, nloc, axis=1).ravel()
    cols = np.tile(cell_dofs, (1, nloc)).ravel()
    mat = sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(ndof, ndof))
    return mat


def assemble_forms(mesh, spec, space):
    """Assemble a(.,.) and b(.,.); exact for the polynomial integrands."""
    p = space.degree
    amats, cs, b1s, _ = spec.coefficients(mesh)
    pts, w = triangle_rule(2 * p)
    phi, dphi = _tabulate(p, pts)
    _, det, inv_t = _element_geometry(mesh)

    # physical gradients g[e, q, i, d]
    g = np.einsum("edk,qik->eqid", inv_t, dphi)
    ag = np.einsum("edk,eqik->eqid", amats, g)
    stiff = np.einsum("q,eqid,eqjd,e->eij", w, ag, g, det)
    mass0 = np.einsum("q,qi,qj->ij", w, phi, phi)
    a_el = stiff + cs[:, None, None] * det[:, None, None] * mass0
    b_el = b1s[:, None, None] * det[:, None, None] * mass0
    a_el = 0.5 * (a_el + np.swapaxes(a_el, 1, 2))
    b_el = 0.5 * (b_el + np.swapaxes(b_el, 1, 2))

    a_mat = _scatter(a_el, space.cell_dofs, space.ndof)
    b_mat = _scatter(b_el, space.cell_dofs, space.ndof)

    # Neumann-side boundary terms
    rows_a, cols_a, vals_a = [], [], []
    rows_b, cols_b, vals_b = [], [], []
    tags = mesh.edge_tags()
    edge_to_tri = _edge_adjacency(mesh)
    t1, w1 = edge_rule(2 * p)
    coeff1d = _edge_lagrange(p)
    vand = np.vander(t1, p + 1, increasing=True)
    tr = vand @ coeff1d  # (nq, p+1) traces in order [start, end, chain...]
    emass0 = np.einsum("q,qi,qj->ij", w1, tr, tr)
    for e in np.flatnonzero(tags >= 0):
        seg = spec.segment_of(int(tags[e]))
        tri, k = edge_to_tri[e]
        length = np.hypot(*(mesh.vertices[mesh.edges[e, 1]]
                            - mesh.vertices[mesh.edges[e, 0]]))
        local = [(k + 1) % 3, (k + 2) % 3] + [3 + k * (p - 1) + i
                                              for i in range(p - 1)]
        gdofs = space.cell_dofs[tri, local]
        # the local trace chain runs from vertex (k+1)%3 to (k+2)%3
        block = emass0 * length
        rr = np.repeat(gdofs, len(gdofs))
        cc = np.tile(gdofs, len(gdofs))
        if seg.alpha != 0.0:
            rows_a.append(rr)
            cols_a.append(cc)
            vals_a.append((seg.alpha * block).ravel())
        if seg.beta2 != 0.0:
            rows_b.append(rr)
            cols_b.append(cc)
            vals_b.append((seg.beta2 * block).ravel())
    if rows_a:
        a_mat = a_mat + sp.coo_matrix(
            (np.concatenate(vals_a),
             (np.concatenate(rows_a), np.concatenate(cols_a))),
            shape=a_mat.shape)
    if rows_b:
        b_mat = b_mat + sp.coo_matrix(
            (np.concatenate(vals_b),
             (np.concatenate(rows_b), np.concatenate(cols_b))),
            shape=b_mat.shape)

    a_full = a_mat.tocsr()
    b_full = b_mat.tocsr()
    a_full.sum_duplicates()
    b_full.sum_duplicates()
    free = space.free
    a_free = a_full[free][:, free].tocsr()
    b_free = b_full[free][:, free].tocsr()
    return AssembledForms(space, a_free, b_free, a_full, b_full)


def _edge_adjacency(mesh):
    """edge id -> (one adjacent triangle, local edge index)."""
    adj = {}
    te = mesh.tri_edges
    for t in range(mesh.num_triangles):
        for k in range(3):
            adj.setdefault(int(te[t, k]), (t, k))
    return adj


def evaluate(mesh, space, coeffs, element, points):
    """Value and physical gradient of a FE function inside one element.

    ``points`` are reference coordinates (n, 2); returns (values (n,),
    gradients (n, 2)).
    """
    phi, dphi = _tabulate(space.degree, points)
    _, _, inv_t = _element_geometry(mesh)
    local = np.asarray(coeffs)[space.cell_dofs[element]]
    values = phi @ local
    grads = np.einsum("dk,qik,i->qd", inv_t[element], dphi, local)
    return values, grads


def prolong(coarse, fine, coeffs):
    """Carry P1 coefficients from a mesh to its bisection refinement.

    Valid for degree-1 spaces when ``fine.mesh`` came from bisect() on
    ``coarse.mesh``: new vertices are parent-edge midpoints, where a P1
    function takes the endpoint average.
    """
    if coarse.degree != 1 or fine.degree != 1:
        raise AssemblyError("prolongation implemented for degree 1 only")
    out = np.zeros(fine.ndof)
    out[:coarse.ndof] = coeffs
    parents = fine.mesh.bisection_parents
    if len(parents) == 0 and fine.ndof > coarse.ndof:
        raise AssemblyError("fine mesh does not record bisection parents")
    out[parents[:, 0]] = 0.5 * (out[parents[:, 1]] + out[parents[:, 2]])
    return out


def export_triplets(matrix, path):
    """Debug dump: `i j value` per nonzero, 0-based, 17 significant digits."""
    coo = matrix.tocoo()
    with open(path, "w") as fh:
        fh.write(f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {v:.17g}\n")
