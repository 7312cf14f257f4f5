import numpy as np
import pytest
import scipy.sparse as sp

from eigenbounds.assembly import assemble_forms, build_space
from eigenbounds.domains import unit_square
from eigenbounds.eigensolve import (
    EigensolveError,
    gram_defects,
    rayleigh_quotient,
    solve_lowest,
)
from eigenbounds.mesh import build_mesh, uniform_refine
from eigenbounds.problem import BoundarySegment, ProblemSpec, Region

PI2 = np.pi ** 2


def square_setup(times, degree=1, neumann=False, c=0.0):
    if neumann:
        segs = [BoundarySegment(dirichlet=False)] * 4
    else:
        segs = []
    spec = ProblemSpec(unit_square(), segments=segs, degree=degree,
                       regions=[Region(np.eye(2), c=c)])
    mesh = uniform_refine(build_mesh(spec.polygon, spec.side_tags()), times)
    space = build_space(mesh, spec)
    forms = assemble_forms(mesh, spec, space)
    return forms


class TestDirichletSquare:
    def test_values_above_exact(self):
        forms = square_setup(times=10)
        sol = solve_lowest(forms.a, forms.b, 4)
        exact = PI2 * np.array([2.0, 5.0, 5.0, 8.0])
        assert np.all(np.diff(sol.values) >= -1e-12)
        assert np.all(sol.values >= exact)          # conforming: from above
        assert np.all(sol.values <= exact * 1.02)   # and reasonably close

    def test_monotone_under_refinement(self):
        coarse = square_setup(times=6)
        fine = square_setup(times=8)
        sc = solve_lowest(coarse.a, coarse.b, 3)
        sf = solve_lowest(fine.a, fine.b, 3)
        assert np.all(sf.values <= sc.values + 1e-12)

    def test_pair_identities(self):
        forms = square_setup(times=7)
        sol = solve_lowest(forms.a, forms.b, 5)
        da, db = gram_defects(forms.a, forms.b, sol)
        assert da <= 1e-9 * sol.values.max()
        assert db <= 1e-11
        assert np.all(sol.residuals <= sol.tol)

    def test_rayleigh_matches(self):
        forms = square_setup(times=6)
        sol = solve_lowest(forms.a, forms.b, 2)
        rq = rayleigh_quotient(forms.a, forms.b, sol.vectors[:, 0])
        assert rq == pytest.approx(sol.values[0], rel=1e-12)


class TestNeumannSquare:
    def test_constant_mode_exact(self):
        # -div grad u + u = lambda u with natural bc: u = 1, lambda = 1
        forms = square_setup(times=6, neumann=True, c=1.0)
        sol = solve_lowest(forms.a, forms.b, 3)
        assert sol.values[0] == pytest.approx(1.0, abs=1e-11)
        v = sol.vectors[:, 0]
        assert np.allclose(v, v[0], atol=1e-9 * abs(v[0]))
        assert sol.values[1] >= 1.0 + PI2  # next mode from above

    def test_sign_convention(self):
        forms = square_setup(times=5, neumann=True, c=1.0)
        sol = solve_lowest(forms.a, forms.b, 4)
        for j in range(4):
            col = sol.vectors[:, j]
            lead = col[np.abs(col) > 1e-12 * np.abs(col).max()][0]
            assert lead > 0.0


class TestDeterminism:
    def test_same_seed_same_bits(self):
        forms = square_setup(times=7)
        s1 = solve_lowest(forms.a, forms.b, 4, seed=11)
        s2 = solve_lowest(forms.a, forms.b, 4, seed=11)
        assert np.array_equal(s1.values, s2.values)
        assert np.array_equal(s1.vectors, s2.vectors)

    def test_warm_start_agrees(self):
        forms = square_setup(times=7)
        base = solve_lowest(forms.a, forms.b, 2)
        warm = solve_lowest(forms.a, forms.b, 2,
                            v0=base.vectors[:, 0])
        assert np.allclose(warm.values, base.values, rtol=1e-12)


class TestDensePath:
    def test_small_pencil(self):
        a = sp.csr_matrix(np.diag([1.0, 2.0, 3.0, 4.0]))
        b = sp.identity(4, format="csr")
        sol = solve_lowest(a, b, 3)
        assert np.allclose(sol.values, [1.0, 2.0, 3.0], atol=1e-14)

    def test_singular_b(self):
        a = sp.csr_matrix(np.diag([1.0, 2.0, 3.0, 4.0, 5.0]))
        b = sp.csr_matrix(np.diag([1.0, 1.0, 1.0, 0.0, 0.0]))
        sol = solve_lowest(a, b, 3)
        assert np.allclose(sol.values, [1.0, 2.0, 3.0], atol=1e-12)
        with pytest.raises(EigensolveError):
            solve_lowest(a, b, 4)

    def test_request_too_many(self):
        a = sp.identity(3, format="csr")
        with pytest.raises(EigensolveError):
            solve_lowest(a, a, 5)


class TestGeneralCoefficients:
    def test_scaled_laplacian(self):
        # A = 2 I scales the Dirichlet spectrum by 2
        spec = ProblemSpec(unit_square(), regions=[Region(2 * np.eye(2))])
        mesh = uniform_refine(build_mesh(spec.polygon, spec.side_tags()), 7)
        space = build_space(mesh, spec)
        forms = assemble_forms(mesh, spec, space)
        plain = square_setup(times=7)
        s2 = solve_lowest(forms.a, forms.b, 2)
        s1 = solve_lowest(plain.a, plain.b, 2)
        assert np.allclose(s2.values, 2 * s1.values, rtol=1e-12)
