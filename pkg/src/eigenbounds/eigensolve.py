"""Lowest eigenpairs of the sparse pencil (A, B).

Shift-invert Lanczos at sigma = 0 with a dense Rayleigh-Ritz pass on the
converged subspace, so the returned pairs satisfy

    U^T A U = diag(values)   and   U^T B U = I

to machine precision.  This exactness is relied on downstream: the bound
formulas assume the small projected eigenproblem holds as an identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class EigensolveError(Exception):
    pass


@dataclass
class EigenSolution:
    """Ascending eigenvalues, B-orthonormal A-orthogonal vectors (n, m)."""

    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    tol: float

    @property
    def count(self):
        return len(self.values)


def rayleigh_quotient(a, b, u):
    return float((u @ (a @ u)) / (u @ (b @ u)))


def _rayleigh_ritz(a, b, x):
    """Re-diagonalize the pencil on span(x); returns (values, vectors)."""
    ax = a @ x
    bx = b @ x
    ar = x.T @ ax
    gr = x.T @ bx
    ar = 0.5 * (ar + ar.T)
    gr = 0.5 * (gr + gr.T)
    theta, z = scipy.linalg.eigh(ar, gr)
    return theta, x @ z


def _fix_signs(vectors):
    for j in range(vectors.shape[1]):
        col = vectors[:, j]
        scale = np.abs(col).max()
        if scale == 0.0:
            continue
        lead = col[np.abs(col) > 1e-12 * scale][0]
        if lead < 0.0:
            vectors[:, j] = -col
    return vectors


def _dense_lowest(a, b, m):
    """Smallest m finite eigenvalues via the reversed pencil B x = mu A x.

    A is positive definite while B may be semidefinite, so the reversed
    ordering keeps scipy.linalg.eigh applicable; mu = 0 directions carry
    no finite eigenvalue.
    """
    ad = a.toarray() if sp.issparse(a) else np.asarray(a, dtype=float)
    bd = b.toarray() if sp.issparse(b) else np.asarray(b, dtype=float)
    mu, x = scipy.linalg.eigh(0.5 * (bd + bd.T), 0.5 * (ad + ad.T))
    order = np.argsort(mu)[::-1]
    mu = mu[order]
    cutoff = len(mu) * np.finfo(float).eps * max(mu[0], 0.0)
    finite = mu > cutoff
    if finite.sum() < m:
        raise EigensolveError(
            f"b-form has rank {int(finite.sum())}, {m} pairs requested")
    keep = order[:m]
    # eigh returns A-orthonormal vectors; x^T B x = mu, so rescale
    return x[:, keep] / np.sqrt(mu[:m])


def solve_lowest(a, b, m, tol=1e-9, seed=0, v0=None):
    """The m lowest eigenpairs of A u = lambda B u on the free dofs.

    Deterministic: the Lanczos starting vector is seeded (or supplied via
    ``v0`` for warm starts).  Raises if any returned pair violates the
    relative residual contract ``tol``.
    """
    n = a.shape[0]
    if m < 1:
        raise EigensolveError("at least one eigenpair must be requested")
    if m > n:
        raise EigensolveError(f"{m} pairs requested on {n} dofs")

    if n < max(6 * m, 60) or m >= n - 1:
        x = _dense_lowest(a, b, m)
    else:
        if v0 is None:
            v0 = np.random.default_rng(seed).standard_normal(n)
        v0 = np.asarray(v0, dtype=float)
        v0 = v0 / np.linalg.norm(v0)
        ncv = min(n, max(2 * m + 1, 32))
        try:
            _, x = spla.eigsh(a, k=m, M=b, sigma=0.0, which="LM",
                              v0=v0, ncv=ncv, tol=1e-14)
        except spla.ArpackNoConvergence as exc:
            got = 0 if exc.eigenvalues is None else len(exc.eigenvalues)
            raise EigensolveError(
                f"Lanczos converged only {got} of {m} pairs") from exc

    theta, u = _rayleigh_ritz(a, b, x)
    u = _fix_signs(np.ascontiguousarray(u))

    au = a @ u
    bu = b @ u
    num = np.linalg.norm(au - bu * theta, axis=0)
    den = np.linalg.norm(au, axis=0) + theta * np.linalg.norm(bu, axis=0)
    residuals = num / np.where(den > 0.0, den, 1.0)
    if np.any(residuals > tol):
        worst = float(residuals.max())
        raise EigensolveError(
            f"eigenpair residual {worst:.3e} exceeds tolerance {tol:.1e}")
    return EigenSolution(theta, u, residuals, tol)


def gram_defects(a, b, solution):
    """Max deviations of (U^T A U, U^T B U) from (diag(values), I)."""
    u = solution.vectors
    da = u.T @ (a @ u) - np.diag(solution.values)
    db = u.T @ (b @ u) - np.eye(solution.count)
    return float(np.abs(da).max()), float(np.abs(db).max())
