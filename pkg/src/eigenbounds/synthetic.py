"""Brute-force validation of the bound formulas on dense random pencils.

Small symmetric definite pencils (a, b) are built with a machine-accurate
spectrum, a trial subspace supplies projected pairs that satisfy the small
eigenproblem exactly, and the residual norms ||w||_a come from dense
solves, so every hypothesis of the bound theorems holds by construction.
The exhaustive shift grids then check the implication itself: lower bounds
never cross the exact eigenvalues they certify.

Floating-point caveat: the theorems are exact-arithmetic statements
evaluated here in doubles, so a violation is only counted beyond a 1e-12
relative allowance.  Real logic errors overshoot by orders of magnitude.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.random import default_rng
from scipy.linalg import cho_factor, cho_solve, cholesky, eigh, solve

from .bounds import ApproxSpectrum, kato, kato_recursive, weinstein

ROUNDOFF_RTOL = 1e-12


@dataclass
class Pencil:
    """Dense symmetric definite pencil with authoritative spectrum."""

    a: np.ndarray
    b: np.ndarray
    spectrum: np.ndarray
    vectors: np.ndarray

    @property
    def dim(self):
        return len(self.spectrum)


def _finish(a, b):
    # re-derive the spectrum from the floating-point matrices themselves,
    # so the oracle values are exact for the pencil actually used
    lam, u = eigh(a, b)
    return Pencil(a=a, b=b, spectrum=lam, vectors=u)


def make_pencil(values, rng=None):
    """Pencil whose spectrum sits at the prescribed positive values."""
    rng = default_rng(rng)
    lam = np.sort(np.asarray(values, dtype=float))
    if not np.all(lam > 0):
        raise ValueError("prescribed spectrum must be positive")
    dim = len(lam)
    r = rng.standard_normal((dim, dim))
    b = r.T @ r + 0.5 * np.eye(dim)
    v = rng.standard_normal((dim, dim))
    # b-orthonormalize the columns, then pin the spectrum by congruence
    low = cholesky(v.T @ b @ v, lower=True)
    u = solve(low, v.T).T
    a = b @ u @ np.diag(lam) @ u.T @ b
    return _finish((a + a.T) / 2, b)


def random_pencil(rng, dim):
    """Random pencil; adjacent eigenvalues collide in ~1/4 of the draws."""
    lam = np.sort(rng.uniform(0.5, 40.0, size=dim))
    if dim >= 2 and rng.random() < 0.25:
        j = int(rng.integers(dim - 1))
        lam[j + 1] = lam[j]
    return make_pencil(lam, rng)


@dataclass
class RitzPairs:
    """Exact projected eigenpairs of a pencil on a trial subspace."""

    values: np.ndarray
    vectors: np.ndarray
    etas: np.ndarray

    def block(self, r, s):
        return ApproxSpectrum(r, self.values[r - 1:s], self.etas[r - 1:s])


def ritz_pairs(pencil, basis):
    """Solve the projected problem and attach exact residual norms."""
    basis = np.atleast_2d(np.asarray(basis, dtype=float))
    ah = basis.T @ pencil.a @ basis
    bh = basis.T @ pencil.b @ basis
    mu, y = eigh((ah + ah.T) / 2, (bh + bh.T) / 2)
    vecs = basis @ y
    chol = cho_factor(pencil.a)
    resid = pencil.b @ vecs * mu - pencil.a @ vecs
    w = cho_solve(chol, resid)
    etas = np.sqrt(np.einsum("ij,ij->j", w, pencil.a @ w).clip(min=0))
    return RitzPairs(values=mu, vectors=vecs, etas=etas)


def spectral_distance(pencil, lam_star):
    """Exhaustive min over the spectrum of (lam_i - lam_star)^2 / lam_i."""
    lam = pencil.spectrum
    return float(((lam - lam_star) ** 2 / lam).min())


def closest_holds(spectrum, n, mu_n):
    """The two-sided multiplicative closeness test against exact values."""
    lam = spectrum
    left = np.sqrt(lam[n - 2] * lam[n - 1]) if n >= 2 else 0.0
    if mu_n < left:
        return False
    if n < len(lam):
        return mu_n * mu_n <= lam[n - 1] * lam[n]
    return True


@dataclass
class ValidationResult:
    trials: int = 0
    kato_checks: int = 0
    weinstein_checks: int = 0
    distance_checks: int = 0
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def flag(self, trial, kind, detail):
        if len(self.violations) < 50:
            self.violations.append(
                {"trial": trial, "kind": kind, "detail": detail})
        elif len(self.violations) == 50:
            self.violations.append(
                {"trial": trial, "kind": "truncated", "detail": "..."})

    def summary(self):
        state = "ok" if self.ok else f"{len(self.violations)} violations"
        return (f"{self.trials} trials: {self.kato_checks} kato, "
                f"{self.weinstein_checks} weinstein, "
                f"{self.distance_checks} distance checks, {state}")


def _slack(lam):
    return ROUNDOFF_RTOL * max(1.0, abs(lam))


def _check_trial(out, trial, pencil, pairs, r, grid):
    lam = pencil.spectrum
    mu, etas = pairs.values, pairs.etas
    k = len(mu)

    for n in range(r, k + 1):
        ell = weinstein(mu[n - 1], etas[n - 1])
        if closest_holds(lam, n, mu[n - 1]):
            out.weinstein_checks += 1
            if ell > lam[n - 1] + _slack(lam[n - 1]):
                out.flag(trial, "weinstein",
                         f"n={n} ell={ell!r} lam={lam[n - 1]!r}")
        out.distance_checks += 1
        bound = etas[n - 1] ** 2
        dist = spectral_distance(pencil, mu[n - 1])
        if dist > bound + _slack(bound):
            out.flag(trial, "distance",
                     f"n={n} min={dist!r} bound={bound!r}")

    for s in range(r, k + 1):
        if s >= pencil.dim or mu[s - 1] >= lam[s]:
            continue
        block = pairs.block(r, s)
        # every shift in (mu_s, lam_{s+1}], endpoint included; rounding can
        # collapse grid points onto mu_s itself when the gap is tiny
        shifts = np.linspace(mu[s - 1], lam[s], grid + 1)[1:]
        shifts = shifts[shifts > mu[s - 1]]
        for nu in shifts:
            for n in range(r, s + 1):
                out.kato_checks += 1
                low = kato(block, nu, n)
                if low > lam[n - 1] + _slack(lam[n - 1]):
                    out.flag(trial, "kato",
                             f"n={n} s={s} nu={nu!r} L={low!r} "
                             f"lam={lam[n - 1]!r}")
        # the recursive sweep seeded at the certified endpoint stays sound
        sweep = kato_recursive(block, float(lam[s]))
        exact = lam[r - 1:s]
        out.kato_checks += len(exact)
        bad = sweep.values > exact + ROUNDOFF_RTOL * np.maximum(1.0, exact)
        if np.any(bad):
            out.flag(trial, "kato-recursive",
                     f"s={s} L={sweep.values[bad]!r}")


def run_validation(trials=1000, seed=0, max_dim=12, grid=9):
    """Randomized soundness sweep; see the module docstring."""
    rng = default_rng(seed)
    out = ValidationResult()
    for trial in range(trials):
        dim = int(rng.integers(3, max_dim + 1))
        pencil = random_pencil(rng, dim)
        k = int(rng.integers(2, dim))
        basis = rng.standard_normal((dim, k))
        if rng.random() < 0.2:
            # near-aligned subspace: stresses the small-residual regime
            basis = pencil.vectors[:, :k] + 1e-4 * basis
        pairs = ritz_pairs(pencil, basis)
        r = 2 if (k >= 3 and rng.random() < 0.3) else 1
        _check_trial(out, trial, pencil, pairs, r, grid)
        out.trials += 1
    return out


def perturbation_sensitivity(seed=0, size=1e-2, trials=200):
    """Fraction of trials where a perturbed pair breaks the kato bound.

    The kato formula assumes pairs that solve the projected eigenproblem
    exactly on their span.  Starting from the exact eigenvectors (where
    the bound is sharp) and nudging one of them by ``size`` produces a
    family without that property, with correctly recomputed Rayleigh
    quotients and exact residual norms, and the resulting "bound" can
    overshoot the exact eigenvalue.  This quantifies how often; it is
    documentation of the sensitivity, nothing asserts it.
    """
    rng = default_rng(seed)
    broken = 0
    for _ in range(trials):
        pencil = random_pencil(rng, 6)
        vecs = pencil.vectors[:, :3].copy()
        j = int(rng.integers(3))
        vecs[:, j] += size * rng.standard_normal(6) * \
            np.linalg.norm(vecs[:, j])
        bnorm = np.sqrt(np.einsum("ij,ij->j", vecs, pencil.b @ vecs))
        vecs /= bnorm
        mu = np.einsum("ij,ij->j", vecs, pencil.a @ vecs)
        order = np.argsort(mu)
        mu, vecs = mu[order], vecs[:, order]
        chol = cho_factor(pencil.a)
        w = cho_solve(chol, pencil.b @ vecs * mu - pencil.a @ vecs)
        etas = np.sqrt(np.einsum("ij,ij->j", w, pencil.a @ w).clip(min=0))
        if mu[2] >= pencil.spectrum[3]:
            continue
        block = ApproxSpectrum(1, mu, etas)
        nu = float(pencil.spectrum[3])
        lows = np.array([kato(block, nu, n) for n in (1, 2, 3)])
        if np.any(lows > pencil.spectrum[:3] * (1 + ROUNDOFF_RTOL)):
            broken += 1
    return broken / trials
