import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import reference_residual_norm
from eigenbounds.assembly import assemble_forms, build_space
from eigenbounds.domains import unit_square
from eigenbounds.eigensolve import solve_lowest
from eigenbounds.estimator import (
    CLASS_PLAIN,
    CLASS_VOLUME_SPLIT,
    Estimator,
    EstimatorError,
    element_terms,
    eta,
    eta_simplified,
    dump_indicators,
    local_indicators,
    residual_fields,
    trace_constants,
)
from eigenbounds.flux import FluxReconstructor
from eigenbounds.mesh import build_mesh, uniform_refine
from eigenbounds.problem import BoundarySegment, ProblemSpec, Region


def dirichlet_square(times=3):
    spec = ProblemSpec(unit_square())
    mesh = uniform_refine(build_mesh(spec.polygon, spec.side_tags()), times)
    return spec, mesh, build_space(mesh, spec)


def robin_square(times=3, alpha=1.0, beta2=0.0, c=0.0):
    segs = [BoundarySegment(dirichlet=False, alpha=alpha, beta2=beta2),
            BoundarySegment(),
            BoundarySegment(dirichlet=False, alpha=alpha, beta2=beta2),
            BoundarySegment()]
    spec = ProblemSpec(unit_square(), segments=segs,
                       regions=[Region(np.eye(2), c=c)])
    mesh = uniform_refine(build_mesh(spec.polygon, spec.side_tags()), times)
    return spec, mesh, build_space(mesh, spec)


def solved_pair(spec, mesh, space, m=1):
    forms = assemble_forms(mesh, spec, space)
    sol = solve_lowest(forms.a, forms.b, m)
    u_full = space.expand(sol.vectors)
    recon = FluxReconstructor(mesh, spec, space)
    flux = recon.reconstruct(u_full, sol.values)
    return sol, u_full, recon, flux


class TestResidualFields:
    def test_matching_flux_cancels(self):
        spec, mesh, space = dirichlet_square(times=2)
        u = space.interpolate(lambda x, y: x + 2 * y)
        est = Estimator(mesh, spec, space)
        q = est.rt.interpolate(lambda x: np.tile([1.0, 2.0], (len(x), 1)))
        fields = est.residual_fields(u, [0.0], q)
        # fsq comes from cancelling quadratic forms of order |grad u|^2
        assert fields.fsq.max() <= 1e-13

    def test_hand_computed_defects(self):
        spec, mesh, space = dirichlet_square(times=2)
        u = space.interpolate(lambda x, y: x)
        est = Estimator(mesh, spec, space)
        fields = est.residual_fields(u, [1.0], np.zeros(est.rt.ndof))
        pts = np.array([[0.3, 0.3], [0.1, 0.6]])
        for el in (0, 3):
            fdef = fields.flux_defect(el, pts)
            assert np.allclose(fdef, [[1.0, 0.0]] * 2, atol=1e-13)
            v = mesh.vertices[mesh.triangles[el]]
            phys = v[0] + pts @ np.stack([v[1] - v[0], v[2] - v[0]], axis=1).T
            assert np.allclose(fields.residual(el, pts), -phys[:, 0],
                               atol=1e-13)
        assert np.allclose(fields.fsq[:, 0], mesh.areas(), atol=1e-15)

    def test_equilibrated_pair_is_clean(self):
        spec, mesh, space = dirichlet_square(times=4)
        sol, u_full, recon, flux = solved_pair(spec, mesh, space)
        est = Estimator(mesh, spec, space, recon.rt, recon.tensors)
        fields = est.residual_fields(u_full, sol.values, flux.coeffs)
        rnorm = np.sqrt(fields.r_norm2[:, 0].sum())
        assert rnorm <= 1e-8 * fields.volume_scale[0]
        assert fields.g_norm2.size == 0

    def test_boundary_defect_matches_data(self):
        spec, mesh, space = robin_square(times=2, alpha=1.5, beta2=0.5)
        u = space.interpolate(lambda x, y: x + y)
        est = Estimator(mesh, spec, space)
        fields = est.residual_fields(u, [2.0], np.zeros(est.rt.ndof))
        e = int(est.neumann_edges[0])
        a, b = mesh.vertices[mesh.edges[e]]
        s = np.array([0.2, 0.7])
        xy = a + s[:, None] * (b - a)
        expect = (1.5 - 2.0 * 0.5) * (xy[:, 0] + xy[:, 1])
        assert np.allclose(fields.boundary_defect(e, s), expect, atol=1e-13)

    def test_one_shot_wrapper(self):
        spec, mesh, space = dirichlet_square(times=1)
        u = space.interpolate(lambda x, y: x * y)
        fields = residual_fields(mesh, spec, u, [1.0],
                                 np.zeros((len(mesh.edges) * 2
                                           + mesh.num_triangles * 2,)))
        assert fields.fsq.shape == (mesh.num_triangles, 1)


class TestElementTerms:
    def test_zero_residuals_give_flux_norm(self):
        # lambda = 0, c = 0, q = 0 makes r bitwise zero, so the volume
        # terms drop out of the best combination entirely
        spec, mesh, space = dirichlet_square(times=2)
        u = space.interpolate(lambda x, y: x + 2 * y)
        est = Estimator(mesh, spec, space)
        fields = est.residual_fields(u, [0.0], np.zeros(est.rt.ndof))
        terms = est.element_terms(fields)
        assert np.array_equal(terms.m_best, terms.f)
        assert np.isinf(terms.r1).all()  # c = 0 everywhere
        assert (terms.r2 == 0).all()

    def test_perturbation_class_pattern(self):
        spec, mesh, space = dirichlet_square(times=3)
        sol, u_full, recon, flux = solved_pair(spec, mesh, space)
        q = flux.coeffs[:, 0].copy()
        q[int(recon.rt.cell_dofs[5, 0])] += 1e-3
        est = Estimator(mesh, spec, space, recon.rt, recon.tensors)
        fields = est.residual_fields(u_full, sol.values, q)
        terms = est.element_terms(fields, 0, lam1_lower=0.9 * 2 * np.pi ** 2)
        touched = np.isinf(terms.m_best)
        assert touched.any()
        assert np.isinf(terms.r1[touched]).all()
        assert np.isinf(terms.r2[touched]).all()
        assert np.isfinite(terms.r3).all()  # beta1 = 1
        assert (terms.klass[touched] == CLASS_VOLUME_SPLIT).all()
        assert np.allclose(terms.y[touched], terms.f[touched])
        assert np.allclose(terms.r_split[touched], terms.r3[touched])

    def test_m_below_each_candidate(self):
        spec, mesh, space = robin_square(times=3, alpha=0.8, beta2=1.0,
                                         c=0.4)
        sol, u_full, recon, flux = solved_pair(spec, mesh, space)
        est = Estimator(mesh, spec, space, recon.rt, recon.tensors)
        fields = est.residual_fields(u_full, sol.values, flux.coeffs)
        t = est.element_terms(fields)
        c1 = np.sqrt(t.f ** 2 + t.r1 ** 2 + t.sum_g1_sq)
        c2 = np.sqrt(t.f ** 2 + t.r1 ** 2) + t.sum_g2
        c3 = np.sqrt(t.f ** 2 + t.sum_g1_sq) + t.r2
        c4 = t.f + t.r2 + t.sum_g2
        for cand in (c1, c2, c3, c4):
            assert (t.m_best <= cand + 1e-300).all()
        assert (t.m_nomass <= t.m_best).all()

    def test_trace_constants_hand_values(self):
        # equilateral unit-edge triangle with unit coefficients
        area = np.sqrt(3) / 4
        c_sq, cbar_sq, mbar = trace_constants(1.0, 1.0, 1.0, 1.0, area)
        assert mbar == pytest.approx(1 / np.pi)
        assert c_sq == pytest.approx(np.sqrt(8.0) / (2 * area))
        assert cbar_sq == pytest.approx(
            (2 + 2 / np.pi) / (np.pi * 2 * area))
        c_sq0, cbar_sq0, mbar0 = trace_constants(1.0, 1.0, 0.0, 1.0, area)
        assert np.isinf(c_sq0)
        assert np.isfinite(cbar_sq0) and mbar0 == pytest.approx(1 / np.pi)

    def test_no_finite_bound_raises(self):
        # boundary-mass-only problem with a nonequilibrated flux: every
        # volume combination is infinite and no first-eigenvalue lower
        # bound can repair the volume residual
        segs = [BoundarySegment(dirichlet=False, alpha=0.0, beta2=1.0),
                BoundarySegment(),
                BoundarySegment(dirichlet=False, alpha=0.0, beta2=1.0),
                BoundarySegment()]
        spec = ProblemSpec(unit_square(), segments=segs,
                           regions=[Region(np.eye(2), c=0.0, beta1=0.0)])
        mesh = uniform_refine(build_mesh(spec.polygon, spec.side_tags()), 2)
        space = build_space(mesh, spec)
        u = space.interpolate(lambda x, y: x * (1 - x))
        est = Estimator(mesh, spec, space)
        q = est.rt.interpolate(lambda x: x)  # div q = 2, so r has a mean
        fields = est.residual_fields(u, [1.0], q)
        terms = est.element_terms(fields, 0, lam1_lower=1.0)
        with pytest.raises(EstimatorError, match="no finite bound"):
            eta(terms, 1.0)


class TestFourWayMonotone:
    @given(st.lists(st.floats(min_value=0.0, max_value=1e6), min_size=5,
                    max_size=5),
           st.integers(min_value=0, max_value=4),
           st.floats(min_value=1e-6, max_value=1e3))
    def test_increase_never_helps(self, vals, idx, bump):
        from eigenbounds.estimator import _four_way
        args = [np.array([v]) for v in vals]
        base = _four_way(*args)[0]
        args[idx] = args[idx] + bump
        assert _four_way(*args)[0] >= base - 1e-12 * max(base, 1.0)

    @given(st.lists(st.one_of(st.floats(min_value=0.0, max_value=1e6),
                              st.just(np.inf)), min_size=5, max_size=5))
    def test_below_candidates(self, vals):
        from eigenbounds.estimator import _four_way
        f, r1, r2, g1sq, g2 = [np.array([v]) for v in vals]
        m = _four_way(f, r1, r2, g1sq, g2)[0]
        assert m <= np.sqrt(f ** 2 + r1 ** 2 + g1sq)[0]
        assert m <= (f + r2 + g2)[0]


class TestEta:
    def test_pooled_without_lower_bound(self):
        # c > 0 and alpha > 0 keep r1 and g1 finite, so every element
        # bound stays finite with no spectral information at all
        spec, mesh, space = robin_square(times=3, alpha=0.8, c=0.4)
        sol, u_full, recon, flux = solved_pair(spec, mesh, space)
        est = Estimator(mesh, spec, space, recon.rt, recon.tensors)
        fields = est.residual_fields(u_full, sol.values, flux.coeffs)
        terms = est.element_terms(fields)
        res = eta(terms)
        assert res.branch == "pooled" and np.isinf(res.eta_split)
        assert res.eta == pytest.approx(np.sqrt((terms.m_best ** 2).sum()))
        assert res.class_counts == (mesh.num_triangles, 0, 0)

    def test_branch_dominance_and_split_form(self):
        spec, mesh, space = dirichlet_square(times=3)
        sol, u_full, recon, flux = solved_pair(spec, mesh, space)
        q = flux.coeffs[:, 0].copy()
        q[int(recon.rt.cell_dofs[7, 3])] += 1e-4
        lam1 = 0.9 * 2 * np.pi ** 2
        est = Estimator(mesh, spec, space, recon.rt, recon.tensors)
        fields = est.residual_fields(u_full, sol.values, q)
        terms = est.element_terms(fields, 0, lam1_lower=lam1)
        res = eta(terms)
        assert res.eta <= res.eta_pooled and res.eta <= res.eta_split
        vol = terms.klass == CLASS_VOLUME_SPLIT
        plain = terms.klass == CLASS_PLAIN
        manual = np.sqrt((terms.y[vol] ** 2).sum()
                         + (terms.m_best[plain] ** 2).sum()) \
            + np.sqrt((terms.r_split[vol] ** 2).sum() / lam1)
        assert res.eta_split == pytest.approx(manual, rel=1e-14)

    def test_reclassify_with_new_lower_bound(self):
        spec, mesh, space = dirichlet_square(times=2)
        sol, u_full, recon, flux = solved_pair(spec, mesh, space)
        q = flux.coeffs[:, 0] + 1e-5
        est = Estimator(mesh, spec, space, recon.rt, recon.tensors)
        fields = est.residual_fields(u_full, sol.values, q)
        terms = est.element_terms(fields)  # classified without lam1
        assert (terms.klass == CLASS_PLAIN).all()
        res = eta(terms, lam1_lower=10.0)
        assert np.isfinite(res.eta)

    def test_monotone_in_flux_norm(self):
        from eigenbounds.estimator import _four_way
        spec, mesh, space = robin_square(times=2, alpha=0.8, c=0.4)
        sol, u_full, recon, flux = solved_pair(spec, mesh, space)
        est = Estimator(mesh, spec, space, recon.rt, recon.tensors)
        fields = est.residual_fields(u_full, sol.values, flux.coeffs)
        terms = est.element_terms(fields)
        base = eta(terms).eta
        terms.f = terms.f * 1.5
        terms.m_best = _four_way(terms.f, terms.r1, terms.r2,
                                 terms.sum_g1_sq, terms.sum_g2)
        assert eta(terms).eta >= base


class TestEtaSimplified:
    def test_clean_reconstruction(self):
        spec, mesh, space = dirichlet_square(times=4)
        sol, u_full, recon, flux = solved_pair(spec, mesh, space)
        est = Estimator(mesh, spec, space, recon.rt, recon.tensors)
        res = est.eta_simplified(u_full[:, 0], sol.values[0],
                                 flux.coeffs[:, 0])
        assert res.path == "simplified"
        assert res.eta == pytest.approx(
            np.sqrt(fields_fsq_sum(est, u_full, sol.values, flux.coeffs)))

    def test_perturbed_dof_falls_back(self):
        spec, mesh, space = dirichlet_square(times=3)
        sol, u_full, recon, flux = solved_pair(spec, mesh, space)
        clean = eta_simplified(mesh, spec, u_full[:, 0], sol.values[0],
                               flux.coeffs[:, 0], space=space)
        q = flux.coeffs[:, 0].copy()
        q[int(recon.rt.cell_dofs[2, 1])] += 1e-3
        guarded = eta_simplified(mesh, spec, u_full[:, 0], sol.values[0], q,
                                 lam1_lower=0.9 * 2 * np.pi ** 2,
                                 space=space)
        assert guarded.path == "safeguarded"
        assert guarded.eta > clean.eta
        assert guarded.residual_norm > 0

    def test_perturbed_without_lam1_raises(self):
        spec, mesh, space = dirichlet_square(times=2)
        sol, u_full, recon, flux = solved_pair(spec, mesh, space)
        q = flux.coeffs[:, 0].copy()
        q[0] += 1e-3
        with pytest.raises(EstimatorError, match="no finite bound"):
            eta_simplified(mesh, spec, u_full[:, 0], sol.values[0], q,
                           space=space)

    def test_zero_function(self):
        spec, mesh, space = dirichlet_square(times=2)
        est = Estimator(mesh, spec, space)
        res = est.eta_simplified(np.zeros(space.ndof), 2.0,
                                 np.zeros(est.rt.ndof))
        assert res.eta == 0.0 and res.path == "simplified"


def fields_fsq_sum(est, u_full, lambdas, q):
    return est.residual_fields(u_full, lambdas, q).fsq[:, 0].sum()


class TestGuarantee:
    def test_dominates_reference_norm(self):
        spec, mesh, space = dirichlet_square(times=3)
        sol, u_full, recon, flux = solved_pair(spec, mesh, space, m=2)
        est = Estimator(mesh, spec, space, recon.rt, recon.tensors)
        for n in range(2):
            res = est.eta_simplified(u_full[:, n], sol.values[n],
                                     flux.coeffs[:, n])
            ref = reference_residual_norm(spec, mesh, space, u_full[:, n],
                                          sol.values[n])
            assert res.eta >= 0.999 * ref
            assert res.eta <= 10.0 * ref

    def test_distance_to_spectrum(self):
        spec, mesh, space = dirichlet_square(times=4)
        sol, u_full, recon, flux = solved_pair(spec, mesh, space)
        est = Estimator(mesh, spec, space, recon.rt, recon.tensors)
        res = est.eta_simplified(u_full[:, 0], sol.values[0],
                                 flux.coeffs[:, 0])
        ij = np.arange(1, 12)
        exact = np.pi ** 2 * (ij[:, None] ** 2 + ij[None, :] ** 2).ravel()
        dist = np.min((exact - sol.values[0]) ** 2 / exact)
        # b-normalized eigenvector, so the bound applies directly
        assert dist <= res.eta ** 2 * (1 + 1e-12)


class TestIndicators:
    def test_max_over_pairs(self):
        spec, mesh, space = dirichlet_square(times=3)
        sol, u_full, recon, flux = solved_pair(spec, mesh, space, m=3)
        est = Estimator(mesh, spec, space, recon.rt, recon.tensors)
        fields = est.residual_fields(u_full, sol.values, flux.coeffs)
        terms = [est.element_terms(fields, n) for n in range(3)]
        ind = local_indicators(terms)
        stacked = np.stack([t.f for t in terms])
        assert np.array_equal(ind, stacked.max(axis=0))
        assert np.array_equal(local_indicators(terms[0]), terms[0].f)

    def test_dump_roundtrip(self, tmp_path):
        spec, mesh, space = dirichlet_square(times=2)
        sol, u_full, recon, flux = solved_pair(spec, mesh, space)
        est = Estimator(mesh, spec, space, recon.rt, recon.tensors)
        fields = est.residual_fields(u_full, sol.values, flux.coeffs)
        terms = est.element_terms(fields)
        path = tmp_path / "indicators.csv"
        dump_indicators(path, terms)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "element_id,flux_defect,element_bound,class,indicator"
        assert len(lines) == mesh.num_triangles + 1
        row = lines[1].split(",")
        assert float(row[1]) == terms.f[0]
        assert row[3] == "plain"
