"""Guaranteed upper bound on the energy norm of the eigenpair residual.

Given an approximate eigenpair (lambda, u) and any H(div)-conforming field
q, the defect fields

    F = A grad u - q                      in each element,
    r = c u - lambda beta1 u - div q      in each element,
    g = alpha u - lambda beta2 u + q . n  on each Neumann edge,

control the energy norm of the residual representative w, defined by
a(w, v) = a(u, v) - lambda b(u, v) for all admissible v.  Each element
combines weighted norms of its defects in four interchangeable ways (mass
weighting, a Poincare constant for mean-zero residuals, two trace
constants for edge terms) and keeps the cheapest; an infinity marks a
combination whose hypothesis fails.  The global bound is the smaller of a
pooled root-sum-square and a split variant that moves the zeroth-order
terms into a separate sum weighted by lambda1_lower**-0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import build_space, evaluate
from .flux import RTSpace, _chi_values, build_tensors

CLASS_PLAIN = 0
CLASS_VOLUME_SPLIT = 1
CLASS_BOUNDARY_SPLIT = 2
CLASS_NAMES = {CLASS_PLAIN: "plain",
               CLASS_VOLUME_SPLIT: "volume-split",
               CLASS_BOUNDARY_SPLIT: "boundary-split"}

# relative tolerance for treating a residual moment integral as zero
MEAN_ZERO_RTOL = 1e-10
# relative residual size below which the flux term alone is a valid bound
CLEAN_RTOL = 1e-8


class EstimatorError(Exception):
    pass


@dataclass
class ResidualFields:
    """Defect fields of m eigenpairs against flux columns, elementwise.

    Volume residuals are stored as coefficients in the scaled-monomial
    basis of each element, boundary residuals as Legendre coefficients on
    each Neumann edge, so norms and moments are exact.
    """

    est: "Estimator"
    u_full: np.ndarray
    lambdas: np.ndarray
    q: np.ndarray
    fsq: np.ndarray       # (nt, m) squared weighted flux defect norms
    r_chi: np.ndarray     # (nt, nchi, m)
    r_norm2: np.ndarray   # (nt, m)
    r_int: np.ndarray     # (nt, m)
    g_leg: np.ndarray     # (ne_neumann, p+1, m)
    g_norm2: np.ndarray   # (ne_neumann, m)
    g_int: np.ndarray     # (ne_neumann, m)
    volume_scale: np.ndarray    # (m,) norm of lambda beta1 u
    boundary_scale: np.ndarray  # (m,) norm scale of the boundary data

    @property
    def npairs(self):
        return len(self.lambdas)

    def flux_defect(self, element, ref_points, n=0):
        """A grad u - q at reference points of one element; (nq, 2)."""
        est = self.est
        _, grads = evaluate(est.mesh, est.space, self.u_full[:, n], element,
                            ref_points)
        tab = est.rt.tabulate([element], ref_points)[0]
        qv = np.einsum("qld,l->qd", tab,
                       self.q[est.rt.cell_dofs[element], n])
        return grads @ est.amats[element].T - qv

    def residual(self, element, ref_points, n=0):
        """r at reference points of one element; (nq,)."""
        est = self.est
        mesh = est.mesh
        tv = mesh.vertices[mesh.triangles[element]]
        jac = np.stack([tv[1] - tv[0], tv[2] - tv[0]], axis=1)
        phys = tv[0] + ref_points @ jac.T
        xhat = (phys - est.rt.centroids[element]) / est.rt.scales[element]
        return _chi_values(xhat, est.space.degree) @ self.r_chi[element, :, n]

    def boundary_defect(self, edge, s, n=0):
        """g at arclength fractions s of one Neumann edge; (nq,)."""
        pos = int(np.searchsorted(self.est.neumann_edges, edge))
        if pos >= len(self.est.neumann_edges) or \
                self.est.neumann_edges[pos] != edge:
            raise EstimatorError(f"edge {edge} is not on the Neumann part")
        x = 2.0 * np.asarray(s) - 1.0
        coeffs = self.g_leg[pos, :, n]
        vand = np.zeros((len(x), len(coeffs)))
        vand[:, 0] = 1.0
        if len(coeffs) > 1:
            vand[:, 1] = x
        for k in range(1, len(coeffs) - 1):
            vand[:, k + 1] = ((2 * k + 1) * x * vand[:, k]
                              - k * vand[:, k - 1]) / (k + 1)
        return vand @ coeffs


@dataclass
class ElementTerms:
    """Per-element defect norms and their combined bounds, for one pair."""

    f: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    r3: np.ndarray
    sum_g1_sq: np.ndarray
    sum_g2: np.ndarray
    sum_g1_sq_nomass: np.ndarray   # over edges with beta2 = 0
    sum_g2_nomass: np.ndarray
    sum_g3_sq_mass: np.ndarray     # over edges with beta2 > 0
    has_mass_edge: np.ndarray
    m_best: np.ndarray
    m_nomass: np.ndarray
    y: np.ndarray
    r_split: np.ndarray
    g_split: np.ndarray
    klass: np.ndarray
    lam1_lower: float | None
    beta1: np.ndarray = field(repr=False, default=None)


@dataclass
class EtaResult:
    """Global bound, its two branches, and the safeguard diagnostics."""

    eta: float
    eta_pooled: float
    eta_split: float
    branch: str
    class_counts: tuple
    residual_norm: float
    boundary_norm: float
    path: str


def trace_constants(h, lam_min, c, edge_len, area):
    """Squared trace constants and the mixed bound for one (element, edge).

    Returns (c_sq, cbar_sq, mbar); c_sq is inf when c = 0.  All inputs may
    be arrays of a common shape.
    """
    h = np.asarray(h, dtype=float)
    c = np.asarray(c, dtype=float)
    shape = np.broadcast(h, lam_min, c, edge_len, area).shape
    inv_c = np.divide(1.0, c, out=np.full(shape, np.inf),
                      where=np.broadcast_to(c, shape) > 0)
    mbar = np.minimum(h / np.pi / np.sqrt(lam_min), np.sqrt(inv_c))
    c_sq = edge_len / (2.0 * area) * np.sqrt(inv_c) \
        * np.sqrt(4.0 * h ** 2 / lam_min + 4.0 * inv_c)
    cbar_sq = edge_len / (2.0 * area) * mbar \
        * (2.0 * h / np.sqrt(lam_min) + 2.0 * mbar)
    return c_sq, cbar_sq, mbar


class Estimator:
    """Defect norms and bounds for eigenpairs on one mesh.

    Shares the element tensors with a flux reconstructor when given; all
    polynomial norms are computed exactly through those tensors.
    """

    def __init__(self, mesh, spec, space, rt=None, tensors=None):
        self.mesh = mesh
        self.spec = spec
        self.space = space
        self.rt = rt if rt is not None else RTSpace(mesh, space.degree)
        self.tensors = tensors if tensors is not None else build_tensors(
            mesh, spec, space, self.rt)
        self.amats, self.cs, self.b1s, self.lam_min = spec.coefficients(mesh)
        self.h = mesh.diameters()
        self.area = mesh.areas()

        tags = mesh.edge_tags()
        self.neumann_edges = np.flatnonzero(tags >= 0)
        ne = len(mesh.edges)
        first_tri = np.full(ne, -1, dtype=np.int64)
        for k in range(3):
            eids = mesh.tri_edges[:, k]
            unset = first_tri[eids] == -1
            first_tri[eids[unset]] = np.flatnonzero(unset)
        self.edge_owner = first_tri[self.neumann_edges]
        self.alphas = np.array([spec.segment_of(int(tags[e])).alpha
                                for e in self.neumann_edges])
        self.betas2 = np.array([spec.segment_of(int(tags[e])).beta2
                                for e in self.neumann_edges])

    def residual_fields(self, u_full, lambdas, q):
        u_full = np.atleast_2d(np.asarray(u_full, dtype=float).T).T
        lambdas = np.atleast_1d(np.asarray(lambdas, dtype=float))
        q = np.atleast_2d(np.asarray(q, dtype=float).T).T
        t = self.tensors
        rt = self.rt
        uloc = u_full[self.space.cell_dofs]          # (nt, nphi, m)
        qloc = q[rt.cell_dofs]                       # (nt, nloc, m)

        fsq = (np.einsum("tim,tij,tjm->tm", uloc, t.stiff, uloc)
               - 2.0 * np.einsum("tim,tij,tjm->tm", uloc, t.cross, qloc)
               + np.einsum("tim,tij,tjm->tm", qloc, t.mass, qloc))
        np.maximum(fsq, 0.0, out=fsq)

        uc = np.einsum("tlj,tjm->tlm", t.to_chi, uloc)
        react = (self.cs[:, None] -
                 np.multiply.outer(self.b1s, lambdas))      # (nt, m)
        r_chi = uc * react[:, None, :] \
            - np.einsum("tlj,tjm->tlm", t.div_coeff, qloc)
        r_norm2 = np.einsum("tlm,tlk,tkm->tm", r_chi, t.mass_chi, r_chi)
        np.maximum(r_norm2, 0.0, out=r_norm2)
        r_int = np.einsum("tl,tlm->tm", t.integ_chi, r_chi)

        u_norm2 = np.einsum("tlm,tlk,tkm->tm", uc, t.mass_chi, uc)
        volume_scale = lambdas * np.sqrt(
            (self.b1s[:, None] ** 2 * u_norm2).sum(axis=0))

        nen = len(self.neumann_edges)
        p = self.space.degree
        k = np.arange(p + 1)
        g_leg = np.zeros((nen, p + 1, len(lambdas)))
        mass_part = np.zeros((nen, len(lambdas)))
        alpha_part = np.zeros((nen, len(lambdas)))
        for i, e in enumerate(self.neumann_edges):
            ids = self._trace_ids(int(e))
            cu = (2 * k + 1)[:, None] * (t.trace_leg.T @ u_full[ids])
            qn = rt.edge_trace([e], q)[0]
            coef = self.alphas[i] - self.betas2[i] * lambdas
            g_leg[i] = coef[None, :] * cu + rt.outward_sign[e] * qn
            w = rt.edge_lengths[e] / (2 * k + 1)
            mass_part[i] = self.betas2[i] ** 2 * (w[:, None] * cu ** 2).sum(0)
            alpha_part[i] = self.alphas[i] ** 2 * (w[:, None] * cu ** 2).sum(0)
        glen = rt.edge_lengths[self.neumann_edges]
        g_norm2 = np.einsum("ekm,ek->em", g_leg ** 2,
                            glen[:, None] / (2 * k + 1))
        g_int = glen[:, None] * g_leg[:, 0]
        boundary_scale = (np.sqrt(alpha_part.sum(axis=0))
                          + lambdas * np.sqrt(mass_part.sum(axis=0)))

        return ResidualFields(self, u_full, lambdas, q, fsq, r_chi, r_norm2,
                              r_int, g_leg, g_norm2, g_int, volume_scale,
                              boundary_scale)

    def _trace_ids(self, e):
        p = self.space.degree
        nv = self.mesh.num_vertices
        va, vb = self.mesh.edges[e]
        ids = [int(va), int(vb)]
        ids.extend(nv + e * (p - 1) + i for i in range(p - 1))
        return np.array(ids, dtype=np.int64)

    def element_terms(self, fields, n=0, lam1_lower=None):
        nt = self.mesh.num_triangles
        f = np.sqrt(fields.fsq[:, n])
        rn = np.sqrt(fields.r_norm2[:, n])
        rint = fields.r_int[:, n]

        r1 = np.divide(rn, np.sqrt(self.cs),
                       out=np.full(nt, np.inf), where=self.cs > 0)
        poincare = self.h / np.pi / np.sqrt(self.lam_min)
        mean_free = np.abs(rint) <= MEAN_ZERO_RTOL * self.h * rn
        r2 = np.where(mean_free, poincare * rn, np.inf)
        r3 = np.divide(rn, np.sqrt(self.b1s),
                       out=np.full(nt, np.inf), where=self.b1s > 0)

        gn = np.sqrt(fields.g_norm2[:, n])
        gint = fields.g_int[:, n]
        own = self.edge_owner
        glen = self.rt.edge_lengths[self.neumann_edges]
        nen = len(self.neumann_edges)
        g1 = np.divide(gn, np.sqrt(self.alphas),
                       out=np.full(nen, np.inf), where=self.alphas > 0)
        c_sq, cbar_sq, _ = trace_constants(
            self.h[own], self.lam_min[own], self.cs[own], glen,
            self.area[own])
        edge_mean_free = np.abs(gint) <= MEAN_ZERO_RTOL * np.sqrt(glen) * gn
        cbar_sq = np.where(edge_mean_free, cbar_sq, np.inf)
        best_const = np.sqrt(np.minimum(c_sq, cbar_sq))
        # both constants infinite forces gn > 0, so no 0 * inf appears
        g2 = np.where(gn > 0, best_const * gn, 0.0)
        g3 = np.divide(gn, np.sqrt(self.betas2),
                       out=np.full(nen, np.inf), where=self.betas2 > 0)

        massless = self.betas2 == 0
        sums = {}
        for name, values, subset in (
                ("g1sq", g1 ** 2, None), ("g2", g2, None),
                ("g1sq0", g1 ** 2, massless), ("g20", g2, massless),
                ("g3sq", g3 ** 2, ~massless)):
            acc = np.zeros(nt)
            if subset is None:
                np.add.at(acc, own, values)
            else:
                np.add.at(acc, own[subset], values[subset])
            sums[name] = acc
        has_mass_edge = np.zeros(nt, dtype=bool)
        has_mass_edge[own[~massless]] = True

        m_best = _four_way(f, r1, r2, sums["g1sq"], sums["g2"])
        m_nomass = _four_way(f, r1, r2, sums["g1sq0"], sums["g20"])
        y = np.minimum(np.sqrt(f ** 2 + sums["g1sq0"]), f + sums["g20"])
        r_split = np.sqrt(r3 ** 2 + sums["g3sq"])
        g_split = np.sqrt(sums["g3sq"])

        terms = ElementTerms(f, r1, r2, r3, sums["g1sq"], sums["g2"],
                             sums["g1sq0"], sums["g20"], sums["g3sq"],
                             has_mass_edge, m_best, m_nomass, y, r_split,
                             g_split, None, lam1_lower, beta1=self.b1s)
        terms.klass = _classify(terms, lam1_lower)
        return terms

    def eta_simplified(self, u_full, lam, q, lam1_lower=None):
        """Flux-defect-only bound when the other residuals are clean.

        Falls back to the full elementwise bound when the volume or
        boundary residual exceeds its round-off threshold.
        """
        fields = self.residual_fields(u_full, [lam], q)
        rnorm = float(np.sqrt(fields.r_norm2[:, 0].sum()))
        gnorm = float(np.sqrt(fields.g_norm2[:, 0].sum()))
        if rnorm <= CLEAN_RTOL * fields.volume_scale[0] and \
                gnorm <= CLEAN_RTOL * fields.boundary_scale[0]:
            value = float(np.sqrt(fields.fsq[:, 0].sum()))
            counts = (self.mesh.num_triangles, 0, 0)
            return EtaResult(value, value, np.inf, "pooled", counts,
                             rnorm, gnorm, "simplified")
        terms = self.element_terms(fields, 0, lam1_lower)
        result = eta(terms, lam1_lower)
        result.path = "safeguarded"
        result.residual_norm = rnorm
        result.boundary_norm = gnorm
        return result


def _four_way(f, r1, r2, g1sq, g2):
    cands = (np.sqrt(f ** 2 + r1 ** 2 + g1sq),
             np.sqrt(f ** 2 + r1 ** 2) + g2,
             np.sqrt(f ** 2 + g1sq) + r2,
             f + r2 + g2)
    return np.minimum.reduce(cands)


def _classify(terms, lam1_lower):
    nt = len(terms.m_best)
    if lam1_lower is None:
        return np.zeros(nt, dtype=np.int8)
    if lam1_lower <= 0:
        raise EstimatorError("lam1_lower must be positive")
    w = 1.0 / np.sqrt(lam1_lower)
    volume = (terms.beta1 > 0) & \
        (terms.y + w * terms.r_split <= terms.m_best)
    boundary = (terms.beta1 == 0) & terms.has_mass_edge & \
        (w * terms.g_split + terms.m_nomass <= terms.m_best)
    return np.where(volume, CLASS_VOLUME_SPLIT,
                    np.where(boundary, CLASS_BOUNDARY_SPLIT,
                             CLASS_PLAIN)).astype(np.int8)


def eta(terms, lam1_lower=None):
    """Combine element terms into the global bound; the smaller branch wins.

    ``lam1_lower`` defaults to the value the terms were classified with;
    passing a different one reclassifies.
    """
    if lam1_lower is None:
        lam1_lower = terms.lam1_lower
        klass = terms.klass
    else:
        klass = _classify(terms, lam1_lower)

    pooled = float(np.sqrt((terms.m_best ** 2).sum()))
    if lam1_lower is None:
        split = np.inf
    else:
        vol = klass == CLASS_VOLUME_SPLIT
        bnd = klass == CLASS_BOUNDARY_SPLIT
        plain = klass == CLASS_PLAIN
        main = ((terms.y[vol] ** 2).sum()
                + (terms.m_nomass[bnd] ** 2).sum()
                + (terms.m_best[plain] ** 2).sum())
        extra = (terms.r_split[vol] ** 2).sum() \
            + (terms.g_split[bnd] ** 2).sum()
        split = float(np.sqrt(main)
                      + np.sqrt(extra) / np.sqrt(lam1_lower))
    value = min(pooled, split)
    if not np.isfinite(value):
        raise EstimatorError(
            "estimator unavailable: no finite bound; supply a lower bound "
            "on the first eigenvalue or check coefficients")
    counts = (int((klass == CLASS_PLAIN).sum()),
              int((klass == CLASS_VOLUME_SPLIT).sum()),
              int((klass == CLASS_BOUNDARY_SPLIT).sum()))
    return EtaResult(value, pooled, split,
                     "pooled" if pooled <= split else "split", counts,
                     np.nan, np.nan, "full")


def residual_fields(mesh, spec, u_full, lambdas, q, space=None):
    """One-shot defect fields; build an Estimator to amortize the tensors."""
    if space is None:
        space = build_space(mesh, spec)
    return Estimator(mesh, spec, space).residual_fields(u_full, lambdas, q)


def element_terms(fields, n=0, lam1_lower=None):
    return fields.est.element_terms(fields, n, lam1_lower)


def eta_simplified(mesh, spec, u_full, lam, q, lam1_lower=None, space=None):
    if space is None:
        space = build_space(mesh, spec)
    return Estimator(mesh, spec, space).eta_simplified(u_full, lam, q,
                                                       lam1_lower)


def local_indicators(terms):
    """Refinement indicator: the largest flux defect over the given pairs."""
    if isinstance(terms, ElementTerms):
        return terms.f.copy()
    return np.maximum.reduce([t.f for t in terms])


def dump_indicators(path, terms, indicator=None):
    """Write element_id, F, M, class, indicator rows as CSV."""
    if indicator is None:
        indicator = terms.f
    with open(path, "w") as fh:
        fh.write("element_id,flux_defect,element_bound,class,indicator\n")
        for i in range(len(terms.f)):
            fh.write("%d,%.17g,%.17g,%s,%.17g\n"
                     % (i, terms.f[i], terms.m_best[i],
                        CLASS_NAMES[int(terms.klass[i])], indicator[i]))
