import math

import numpy as np
import pytest

from eigenbounds import domains
from eigenbounds.mesh import (DIRICHLET, Mesh, MeshError, bisect, build_mesh,
                              classify_vertices, read_mesh, uniform_refine,
                              vertex_patch, write_mesh)


def shoelace(polygon):
    x, y = polygon[:, 0], polygon[:, 1]
    return 0.5 * abs(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def assert_conforming(mesh):
    counts = np.bincount(mesh.tri_edges.ravel(), minlength=len(mesh.edges))
    assert counts.max() <= 2
    boundary = {tuple(sorted(e)) for e in mesh.boundary}
    actual = {tuple(e) for e in mesh.edges[counts == 1]}
    assert boundary == actual
    assert np.all(mesh.signed_areas() > 0)


class TestBuildMesh:
    def test_unit_square_two_triangles(self):
        mesh = build_mesh(domains.unit_square())
        assert mesh.num_triangles == 2
        assert mesh.num_vertices == 4
        assert_conforming(mesh)

    def test_dumbbell_vertices_inside_and_boundary_covered(self):
        poly = domains.dumbbell_polygon()
        mesh = build_mesh(poly)
        assert_conforming(mesh)
        from eigenbounds.mesh import polygon_contains
        diam = 2.25 * math.pi
        assert polygon_contains(poly, mesh.vertices, tol=1e-12 * diam).all()
        # boundary edges cover the polygon boundary exactly
        perimeter = sum(np.hypot(*(poly[(i + 1) % len(poly)] - poly[i]))
                        for i in range(len(poly)))
        total = 0.0
        for i, j in mesh.boundary:
            total += np.hypot(*(mesh.vertices[i] - mesh.vertices[j]))
        assert total == pytest.approx(perimeter, rel=1e-12)

    def test_rectangle_area_matches_shoelace(self):
        poly = domains.rectangle(2.25 * math.pi, math.pi)
        mesh = build_mesh(poly)
        assert np.sum(mesh.areas()) == pytest.approx(shoelace(poly),
                                                     rel=1e-12)
        assert np.sum(mesh.areas()) == pytest.approx(2.25 * math.pi ** 2,
                                                     rel=1e-12)

    def test_nonconvex_earclip_path(self):
        # an L-shape rotated so it is not rectilinear
        L = np.array([[0, 0], [2, 0], [2, 1], [1, 1], [1, 2], [0, 2]],
                     dtype=float)
        c, s = math.cos(0.3), math.sin(0.3)
        rot = L @ np.array([[c, s], [-c * s / c, c]]).T  # shear+rotate-ish
        mesh = build_mesh(rot)
        assert_conforming(mesh)
        assert np.sum(mesh.areas()) == pytest.approx(shoelace(rot), rel=1e-12)

    def test_clockwise_polygon_normalized(self):
        poly = domains.unit_square()[::-1]
        mesh = build_mesh(poly)
        assert np.all(mesh.signed_areas() > 0)

    def test_zero_area_rejected(self):
        with pytest.raises(MeshError):
            build_mesh(np.array([[0, 0], [1, 1], [2, 2]], dtype=float))

    def test_self_intersecting_rejected(self):
        bowtie = np.array([[0, 0], [1, 1], [1, 0], [0, 1]], dtype=float)
        with pytest.raises(MeshError):
            build_mesh(bowtie)


class TestBisect:
    def test_uniform_bisection_of_square(self):
        mesh = build_mesh(domains.unit_square())
        fine = bisect(mesh, np.arange(2))
        assert fine.num_triangles == 4
        assert_conforming(fine)
        assert np.sum(fine.areas()) == pytest.approx(1.0, abs=1e-14)

    def test_single_mark_closure(self):
        mesh = uniform_refine(build_mesh(domains.unit_square()))
        assert mesh.num_triangles == 4
        fine = bisect(mesh, [0])
        assert_conforming(fine)
        # the marked element is gone; its children are one generation deeper
        assert fine.generation.max() >= mesh.generation[0] + 1
        assert fine.num_triangles > mesh.num_triangles

    def test_repeated_uniform_refinement_counts_and_angles(self):
        mesh = build_mesh(domains.unit_square())
        base_angle = mesh.min_angle()
        for k in range(1, 9):
            mesh = bisect(mesh, np.arange(mesh.num_triangles))
            assert mesh.num_triangles == 2 * 2 ** k
            assert mesh.min_angle() >= base_angle - 1e-12
            assert np.sum(mesh.areas()) == pytest.approx(1.0, rel=1e-10)
        assert_conforming(mesh)

    def test_random_refinement_sequences_keep_invariants(self):
        rng = np.random.default_rng(3)
        poly = domains.dumbbell_polygon()
        mesh = build_mesh(poly)
        area = shoelace(poly)
        for _ in range(6):
            nt = mesh.num_triangles
            marked = rng.choice(nt, size=max(1, nt // 4), replace=False)
            mesh = bisect(mesh, marked)
            assert_conforming(mesh)
            assert np.sum(mesh.areas()) == pytest.approx(area, rel=1e-10)

    def test_marked_generation_increases(self):
        mesh = uniform_refine(build_mesh(domains.unit_square()), 2)
        gen_before = mesh.generation[5]
        fine = bisect(mesh, [5])
        # every surviving element of generation <= gen_before descends from
        # unmarked triangles; the marked one must have been split
        assert fine.num_triangles > mesh.num_triangles
        assert fine.generation.max() >= gen_before + 1

    def test_empty_mark_returns_same_mesh(self):
        mesh = build_mesh(domains.unit_square())
        assert bisect(mesh, []) is mesh

    def test_patch_covering_identity(self):
        mesh = uniform_refine(build_mesh(domains.unit_square()), 3)
        total = sum(len(mesh.triangles_at(v))
                    for v in range(mesh.num_vertices))
        assert total == 3 * mesh.num_triangles


class TestVertexClasses:
    def test_all_dirichlet_square(self):
        mesh = uniform_refine(build_mesh(domains.unit_square()), 3)
        classes = classify_vertices(mesh)
        on_boundary = np.zeros(mesh.num_vertices, dtype=bool)
        for i, j in mesh.boundary:
            on_boundary[[i, j]] = True
        assert set(classes.dirichlet) == set(np.flatnonzero(on_boundary))
        assert set(classes.interior) == set(np.flatnonzero(~on_boundary))
        assert classes.neumann.size == 0

    def test_dirichlet_wins_at_corners(self):
        # left side (side 3: vertex 3 -> vertex 0) Neumann, rest Dirichlet
        tags = [DIRICHLET, DIRICHLET, DIRICHLET, 3]
        mesh = uniform_refine(build_mesh(domains.unit_square(), tags), 2)
        classes = classify_vertices(mesh)
        corners = [np.flatnonzero(np.all(mesh.vertices == c, axis=1))[0]
                   for c in ([0, 0], [0, 1])]
        for v in corners:
            assert classes.kinds[v] == 2  # Dirichlet despite Neumann side
        # strictly interior points of the left side are Neumann
        left = np.flatnonzero((mesh.vertices[:, 0] == 0)
                              & (mesh.vertices[:, 1] > 0)
                              & (mesh.vertices[:, 1] < 1))
        assert np.all(classes.kinds[left] == 1)

    def test_all_neumann(self):
        mesh = build_mesh(domains.unit_square(), [0, 1, 2, 3])
        classes = classify_vertices(mesh)
        assert classes.dirichlet.size == 0
        assert classes.neumann.size == 4


class TestVertexPatch:
    def test_interior_vertex_patch(self):
        # hexagon star: center vertex surrounded by 6 triangles
        angles = np.linspace(0, 2 * np.pi, 7)[:-1]
        vertices = np.vstack([[0.0, 0.0],
                              np.column_stack([np.cos(angles),
                                               np.sin(angles)])])
        triangles = np.array([[0, 1 + k, 1 + (k + 1) % 6] for k in range(6)])
        boundary = {tuple(sorted((1 + k, 1 + (k + 1) % 6))): DIRICHLET
                    for k in range(6)}
        mesh = Mesh(vertices, triangles, np.zeros(6, dtype=int), boundary)
        patch = vertex_patch(mesh, 0)
        assert len(patch.elements) == 6
        assert patch.dirichlet_edges.size == 0
        assert patch.neumann_edges.size == 0
        assert patch.exterior_edges.size == 6
        assert patch.interior_edges.size == 6

    def test_corner_vertex_patch(self):
        mesh = uniform_refine(build_mesh(domains.unit_square()), 2)
        v = int(np.flatnonzero(np.all(mesh.vertices == [0, 0], axis=1))[0])
        patch = vertex_patch(mesh, v)
        assert patch.dirichlet_edges.size == 2
        assert patch.neumann_edges.size == 0
        for e in patch.dirichlet_edges:
            assert v in mesh.edges[e]

    def test_neumann_side_vertex_patch(self):
        tags = [0, DIRICHLET, DIRICHLET, DIRICHLET]  # bottom side Neumann
        mesh = uniform_refine(build_mesh(domains.unit_square(), tags), 3)
        v = next(int(v) for v in range(mesh.num_vertices)
                 if mesh.vertices[v, 1] == 0 and 0 < mesh.vertices[v, 0] < 1)
        patch = vertex_patch(mesh, v)
        assert patch.neumann_edges.size == 2
        assert patch.dirichlet_edges.size == 0
        # every patch-boundary edge is in exactly one class
        n_boundary = (patch.exterior_edges.size + patch.neumann_edges.size
                      + patch.dirichlet_edges.size)
        eids, counts = np.unique(mesh.tri_edges[patch.elements],
                                 return_counts=True)
        assert n_boundary == np.sum(counts == 1)


class TestMeshIO:
    def test_round_trip_bit_exact(self, tmp_path):
        mesh = bisect(build_mesh(domains.dumbbell_polygon()), [0, 3, 5])
        path = tmp_path / "mesh.txt"
        write_mesh(mesh, path)
        back = read_mesh(path)
        assert np.array_equal(back.vertices, mesh.vertices)
        assert np.array_equal(back.triangles, mesh.triangles)
        assert np.array_equal(back.regions, mesh.regions)
        assert back.boundary == mesh.boundary
        # writing again produces identical bytes
        path2 = tmp_path / "mesh2.txt"
        write_mesh(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_reader_rejects_bad_orientation(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("vertices 3\n0 0\n1 0\n0 1\n"
                        "triangles 1\n0 2 1 0\n"
                        "boundary 3\n0 1 -1\n1 2 -1\n0 2 -1\n")
        with pytest.raises(MeshError):
            read_mesh(path)

    def test_reader_rejects_wrong_boundary(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("vertices 3\n0 0\n1 0\n0 1\n"
                        "triangles 1\n0 1 2 0\n"
                        "boundary 2\n0 1 -1\n1 2 -1\n")
        with pytest.raises(MeshError):
            read_mesh(path)
