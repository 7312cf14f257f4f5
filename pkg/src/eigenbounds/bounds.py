"""Lower bounds for eigenvalues from approximate pairs and residual norms.

Input is a block of approximate eigenvalues (Rayleigh quotients of
b-normalized pairs, hence upper bounds for their exact counterparts) with
per-pair residual norms eta_n >= ||w_n||_a.  Two bound families are
combined:

* ``weinstein``: first order in eta, needs nothing beyond the pair itself,
  but is a true lower bound only when the approximate value is closer to
  its own eigenvalue than to the neighbours (multiplicative closeness).
* ``kato``: second order in eta, needs a shift nu separating the computed
  part of the spectrum from the rest and pairs that solve the projected
  eigenproblem exactly on their span.

``combine`` mixes the two with no outside data by seeding the shift with
the next pair's weinstein bound; the result is sharp but heuristic.
``fixed_shift_report`` consumes a certified shift and flags per row what
it can actually guarantee.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

# shift sources whose value is certified to sit below the next exact
# eigenvalue; "ell_{s+1}" is the self-seeded heuristic of combine()
GUARANTEED_SOURCES = frozenset({"analytic", "homotopy", "user"})
COMBINATION_SOURCE = "ell_{s+1}"


class BoundsError(ValueError):
    pass


@dataclass
class ApproxSpectrum:
    """Approximate eigenvalues ``first..last`` with residual bounds."""

    first: int
    values: np.ndarray
    etas: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_1d(np.asarray(self.values, dtype=float))
        self.etas = np.atleast_1d(np.asarray(self.etas, dtype=float))
        if self.first < 1:
            raise BoundsError("index range must start at 1 or above")
        if self.values.shape != self.etas.shape or self.values.ndim != 1:
            raise BoundsError("values and residual bounds must align")
        if not np.all(self.values > 0):
            raise BoundsError("approximate eigenvalues must be positive")
        if np.any(np.diff(self.values) < 0):
            raise BoundsError("approximate eigenvalues must be ascending")
        if not np.all((self.etas >= 0) & np.isfinite(self.etas)):
            raise BoundsError("residual bounds must be finite and >= 0")

    @property
    def last(self):
        return self.first + len(self.values) - 1

    def index(self, n):
        if not self.first <= n <= self.last:
            raise BoundsError(
                f"index {n} outside computed range "
                f"{self.first}..{self.last}")
        return n - self.first

    def head(self, n):
        """The sub-block first..n (still an exact projected family)."""
        k = self.index(n) + 1
        return ApproxSpectrum(self.first, self.values[:k], self.etas[:k])


def weinstein(lam_star, eta):
    """First-order lower bound from a single pair.

    Evaluated as 4 lam^2 / (eta + sqrt(eta^2 + 4 lam))^2, which has no
    cancellation for any eta >= 0.  Always positive and at most lam_star;
    below the exact eigenvalue only under the closeness condition, which
    the caller tracks.
    """
    lam = np.asarray(lam_star, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if np.any(lam <= 0):
        raise BoundsError("approximate eigenvalue must be positive")
    if np.any(eta < 0):
        raise BoundsError("residual bound must be >= 0")
    root = np.sqrt(eta * eta + 4.0 * lam)
    low = np.minimum(4.0 * lam * lam / ((eta + root) ** 2), lam)
    # exact fixed point: zero residual returns the input value bitwise
    low = np.where(eta == 0, lam, low)
    return float(low) if low.ndim == 0 else low


def _check_shift(nu, top):
    if not nu > top:
        raise BoundsError(
            f"shift {nu:.12g} must exceed the largest approximate "
            f"eigenvalue {top:.12g}")


def _kato_all(values, etas, nu):
    # L_n for the whole block at once via suffix sums of the series terms
    terms = etas * etas / (values * values * (nu - values))
    tails = np.cumsum(terms[::-1])[::-1]
    return values / (1.0 + nu * values * tails)


def kato(approx, nu, n):
    """Second-order lower bound for eigenvalue ``n`` using shift ``nu``.

    Requires nu above every approximate value in the block; the caller
    guarantees nu is at most the first exact eigenvalue beyond it.
    """
    pos = approx.index(n)
    _check_shift(nu, approx.values[-1])
    return float(_kato_all(approx.values, approx.etas, nu)[pos])


@dataclass
class KatoBounds:
    """Best bounds over the recursive sweep, with the winning shifts."""

    values: np.ndarray
    shifts: np.ndarray
    passes: int


def kato_recursive(approx, nu0, floor=None):
    """Sweep of kato passes, reusing computed bounds as sharper shifts.

    Pass 1 covers the whole block with ``nu0``.  Each later pass drops the
    top index by one and shifts with the best lower bound obtained so far
    for the first value beyond the truncated block; ``floor`` (for example
    the weinstein bounds) joins that "best so far" but never the output.
    Passes whose shift fails the ordering requirement are skipped.  Each
    returned bound is the max over the passes that covered its index.
    """
    values, etas = approx.values, approx.etas
    _check_shift(nu0, values[-1])
    low = _kato_all(values, etas, nu0)
    shifts = np.full(len(values), float(nu0))
    best = low.copy() if floor is None else np.maximum(low, floor)
    passes = 1
    for top in range(len(values) - 2, -1, -1):
        nu = float(best[top + 1])
        if nu <= values[top]:
            continue
        trial = _kato_all(values[:top + 1], etas[:top + 1], nu)
        gained = trial > low[:top + 1]
        shifts[:top + 1][gained] = nu
        low[:top + 1] = np.where(gained, trial, low[:top + 1])
        best[:top + 1] = np.maximum(best[:top + 1], low[:top + 1])
        passes += 1
    return KatoBounds(low, shifts, passes)


def distance_bound(lam_star, eta, u_norm_b):
    """Upper bound for min_i (lam_i - lam_star)^2 / lam_i.  Diagnostic.

    ``lam_star`` names the point whose spectral distance is bounded; the
    bound itself depends only on the residual and the b-norm of the pair.
    """
    if not u_norm_b > 0:
        raise BoundsError("pair has zero b-norm")
    return float((eta / u_norm_b) ** 2)


def closeness_check(lower_n, lower_next, upper_n):
    """Whether upper_n <= sqrt(lower_n * lower_next).

    Passing certifies the closeness condition at index n as long as the
    two lower bounds are themselves certified.
    """
    if not (lower_n > 0 and lower_next > 0 and upper_n > 0):
        raise BoundsError("closeness check needs positive inputs")
    return bool(upper_n * upper_n <= lower_n * lower_next)


@dataclass
class BoundRow:
    n: int
    upper: float
    eta: float
    weinstein: float
    kato: float | None
    lower: float
    nu: float | None
    nu_provenance: str | None
    guaranteed: bool
    closeness: bool


@dataclass
class BoundsReport:
    """Per-index two-sided data plus the run-level context fields."""

    rows: list
    mode: str
    gaps: list
    nu0: float | None = None

    def row(self, n):
        for row in self.rows:
            if row.n == n:
                return row
        raise BoundsError(f"no row for index {n}")

    def to_dict(self):
        return {"mode": self.mode, "nu0": self.nu0, "gaps": list(self.gaps),
                "rows": [asdict(r) for r in self.rows]}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _make_row(n, upper, eta, ell, low_k, nu, provenance, guaranteed, close):
    lower = float(max(ell, low_k)) if low_k is not None else float(ell)
    if not lower <= upper:
        raise BoundsError(
            f"lower bound {lower:.12g} exceeds upper bound {upper:.12g} "
            f"at index {n}; input data is inconsistent")
    return BoundRow(n=n, upper=float(upper), eta=float(eta),
                    weinstein=float(ell),
                    kato=None if low_k is None else float(low_k),
                    lower=lower, nu=nu, nu_provenance=provenance,
                    guaranteed=guaranteed, closeness=close)


def _gap_ratios(values):
    return [float(g) for g in values[1:] / values[:-1]]


def combine(approx):
    """Two-sided report for first..last-1 with a self-seeded kato sweep.

    The block must extend one index past the last reported row; that extra
    pair's weinstein bound seeds the shift when it clears the top reported
    value, otherwise the kato column is absent.  Every row is heuristic:
    the seed itself relies on an unverified closeness condition.
    """
    if len(approx.values) < 2:
        raise BoundsError("need one pair beyond the last reported index")
    values, etas = approx.values, approx.etas
    ells = weinstein(values, etas)
    nu0 = float(ells[-1])
    chain = None
    if values[-2] < nu0:
        chain = kato_recursive(approx.head(approx.last - 1), nu0,
                               floor=ells[:-1])
    lowers = np.maximum(ells[:-1], chain.values) if chain is not None \
        else ells[:-1]
    neighbours = np.append(lowers[1:], ells[-1])
    rows = []
    for i, n in enumerate(range(approx.first, approx.last)):
        close = closeness_check(lowers[i], neighbours[i], values[i])
        rows.append(_make_row(
            n, values[i], etas[i], ells[i],
            None if chain is None else chain.values[i],
            None if chain is None else float(chain.shifts[i]),
            None if chain is None else COMBINATION_SOURCE,
            False, close))
    return BoundsReport(rows=rows, mode="combination",
                        gaps=_gap_ratios(values), nu0=nu0)


def weinstein_report(approx, nu=None):
    """First-order-only report when no admissible shift is available.

    Used when a configured shift fails the separation test against the
    top approximate value: the kato column is absent and nothing is
    guaranteed.  ``nu`` only records the rejected value.
    """
    values, etas = approx.values, approx.etas
    ells = weinstein(values, etas)
    rows = []
    for i, n in enumerate(range(approx.first, approx.last + 1)):
        # no neighbour data above the block, so the top row cannot attest
        close = False if i == len(values) - 1 else closeness_check(
            ells[i], ells[i + 1], values[i])
        rows.append(_make_row(n, values[i], etas[i], ells[i], None, None,
                              None, False, close))
    return BoundsReport(rows=rows, mode="fixed-nu",
                        gaps=_gap_ratios(values),
                        nu0=None if nu is None else float(nu))


def fixed_shift_report(approx, nu, provenance):
    """Two-sided report for the whole block from an externally given shift.

    With a certified shift (provenance in GUARANTEED_SOURCES) the kato
    column is guaranteed; a weinstein value that wins the max is promoted
    only when the closeness check passes on certified data.  The sweep
    runs without the weinstein floor so certification survives recursion.
    """
    values, etas = approx.values, approx.etas
    chain = kato_recursive(approx, nu, floor=None)
    ells = weinstein(values, etas)
    certified = provenance in GUARANTEED_SOURCES
    cert_next = np.append(chain.values[1:], nu)
    rows = []
    for i, n in enumerate(range(approx.first, approx.last + 1)):
        close = closeness_check(chain.values[i], cert_next[i], values[i])
        flagged = bool(certified and (chain.values[i] >= ells[i] or close))
        rows.append(_make_row(
            n, values[i], etas[i], ells[i], chain.values[i],
            float(chain.shifts[i]), provenance, flagged, close))
    return BoundsReport(rows=rows, mode="fixed-nu",
                        gaps=_gap_ratios(values), nu0=float(nu))
