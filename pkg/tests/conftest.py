import numpy as np
from scipy.sparse.linalg import spsolve

from eigenbounds.assembly import assemble_forms, build_space, prolong
from eigenbounds.mesh import bisect


def reference_residual_norm(spec, mesh, space, u_full, lam, levels=2):
    """Energy norm of the residual representative on a refined mesh.

    Solves a(w, v) = a(u, v) - lam b(u, v) over the space obtained by
    uniformly bisecting ``levels`` more times, with u carried over exactly.
    Used as the oracle the guaranteed bound must dominate.
    """
    cur_mesh, cur_space, u = mesh, space, np.asarray(u_full, dtype=float)
    for _ in range(levels):
        fine = bisect(cur_mesh, np.arange(cur_mesh.num_triangles))
        fine_space = build_space(fine, spec)
        u = prolong(cur_space, fine_space, u)
        cur_mesh, cur_space = fine, fine_space
    forms = assemble_forms(cur_mesh, spec, cur_space)
    rhs = ((forms.a_full - lam * forms.b_full) @ u)[cur_space.free]
    w = spsolve(forms.a.tocsc(), rhs)
    return float(np.sqrt(w @ rhs))
