"""Adaptive loop (solve, estimate, mark, refine) and the homotopy chain.

``adapt`` drives one problem from its coarsest mesh until a dof budget is
exceeded, recording a two-sided bounds report per iteration.  Marking uses
the bulk criterion on the per-element flux defects; refinement is
newest-vertex bisection, so coarse eigenvectors prolong onto the next mesh
as warm starts.

``run_homotopy`` chains adaptive runs over a nested sequence of domains.
Stage 0 has a closed-form spectrum; each later stage runs in fixed-shift
mode with a shift certified by the previous stage, valid because Dirichlet
eigenvalues only grow when the domain shrinks.
"""

import os
import time
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .assembly import assemble_forms, build_space, prolong
from .bounds import (BoundRow, BoundsReport, ApproxSpectrum,
                     fixed_shift_report, weinstein_report, combine)
from .eigensolve import EigensolveError, solve_lowest
from .estimator import Estimator, local_indicators
from .flux import FluxReconstructor
from .mesh import bisect, build_mesh, polygon_contains, uniform_refine, \
    write_mesh
from .problem import load_problem


class DriverError(Exception):
    pass


# -- configuration -----------------------------------------------------------


@dataclass
class AdaptiveConfig:
    """Knobs of one adaptive run: index block, marking, budget, shift.

    The shift pair (nu, nu_provenance) may stay unset at construction;
    a homotopy chain injects it stage by stage.  ``adapt`` checks it.
    """

    first: int = 1
    last: int = 1
    theta: float = 0.5
    max_dofs: int = 100000
    mode: str = "combination"
    nu: float | None = None
    nu_provenance: str | None = None
    lambda1_lower: float | None = None
    solver_tol: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if self.first < 1:
            raise DriverError("first index must be at least 1")
        if self.last < self.first:
            raise DriverError("last index must not precede the first")
        if not 0.0 < self.theta <= 1.0:
            raise DriverError("marking fraction must lie in (0, 1]")
        if self.max_dofs <= 0:
            raise DriverError("dof budget must be positive")
        if self.mode not in ("combination", "fixed-nu"):
            raise DriverError(f"unknown mode {self.mode!r}")

    def require_shift(self):
        if self.mode == "fixed-nu":
            if self.nu is None:
                raise DriverError("fixed-nu mode needs a shift value")
            if self.nu_provenance is None:
                raise DriverError("fixed-nu mode needs a shift provenance")

    @property
    def num_pairs(self):
        """Eigenpairs per solve; combination mode needs one spare."""
        return self.last + 1 if self.mode == "combination" else self.last


# -- marking -----------------------------------------------------------------


def doerfler_mark(indicators, theta):
    """Minimal element set holding a theta^2 share of the squared total.

    Greedy by descending indicator, ties by ascending element id.  All-zero
    indicators give an empty set; the caller refines everything instead.
    """
    indicators = np.asarray(indicators, dtype=float)
    if indicators.ndim != 1:
        raise DriverError("indicators must be a flat array")
    if not np.all(np.isfinite(indicators)) or np.any(indicators < 0):
        raise DriverError("indicators must be finite and nonnegative")
    if not 0.0 < theta <= 1.0:
        raise DriverError("marking fraction must lie in (0, 1]")
    order = np.argsort(-indicators, kind="stable")
    running = np.cumsum(indicators[order] ** 2)
    total = running[-1]
    if total == 0.0:
        return np.array([], dtype=np.int64)
    # the target never exceeds the last entry, so the index stays in range
    k = int(np.searchsorted(running, theta * theta * total)) + 1
    return np.sort(order[:k])


# -- trace -------------------------------------------------------------------


@dataclass
class TraceEntry:
    """One adaptive iteration: mesh size, eigenpair data, bounds report."""

    iteration: int
    dofs: int
    num_triangles: int
    values: np.ndarray
    etas: np.ndarray
    report: BoundsReport
    seconds: float


CSV_HEADER = "iter,dofs,n,upper,eta,weinstein,kato,lower,guaranteed"


@dataclass
class RunTrace:
    """Chronological record of an adaptive run, one entry per solve."""

    entries: list = field(default_factory=list)
    failure: str | None = None
    final_mesh: object = None

    @property
    def final(self):
        if not self.entries:
            raise DriverError("trace has no entries")
        return self.entries[-1]

    def append(self, entry):
        if self.entries and entry.dofs <= self.entries[-1].dofs:
            raise DriverError("dof counts along a trace must increase")
        self.entries.append(entry)

    def csv_text(self):
        """Flat table, one line per reported index per iteration."""
        lines = [CSV_HEADER]
        for e in self.entries:
            for row in e.report.rows:
                kato = "" if row.kato is None else "%.12g" % row.kato
                lines.append("%d,%d,%d,%.12g,%.12g,%.12g,%s,%.12g,%d" % (
                    e.iteration, e.dofs, row.n, row.upper, row.eta,
                    row.weinstein, kato, row.lower, row.guaranteed))
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write(self.csv_text())

    def summary(self):
        out = {"iterations": len(self.entries), "failure": self.failure}
        if self.entries:
            out["final_dofs"] = self.final.dofs
            out["final_report"] = self.final.report.to_dict()
            out["seconds"] = float(sum(e.seconds for e in self.entries))
        return out


# -- adaptive loop -----------------------------------------------------------


def _solvable_mesh(mesh, spec, num_pairs):
    """Uniformly refine until the space can hold the requested pairs."""
    space = build_space(mesh, spec)
    while space.num_free < num_pairs + 2:
        mesh = uniform_refine(mesh)
        space = build_space(mesh, spec)
    return mesh, space


def _refine(mesh, spec, marked, space, carry):
    """Bisect the marked set, then keep bisecting until dofs grow.

    Splitting only Dirichlet boundary edges adds no unknowns; forcing
    growth keeps the trace invariant and the loop finite.  ``carry`` is
    a full coefficient vector prolonged through every level in between.
    """
    fine = bisect(mesh, marked)
    fine_space = build_space(fine, spec)
    if carry is not None:
        carry = prolong(space, fine_space, carry)
    while fine_space.num_free <= space.num_free:
        nxt = bisect(fine, np.arange(fine.num_triangles))
        nxt_space = build_space(nxt, spec)
        if carry is not None:
            carry = prolong(fine_space, nxt_space, carry)
        fine, fine_space = nxt, nxt_space
    return fine, fine_space, carry


def estimate_block(mesh, spec, space, solution, config):
    """Residual bounds eta_n and marking indicators for n = first..m.

    Reconstructs one equilibrated flux per pair, evaluates the certified
    bound for each, and takes the elementwise worst flux defect as the
    refinement indicator.
    """
    first = config.first
    values = solution.values[first - 1:]
    u_full = space.expand(solution.vectors[:, first - 1:])
    recon = FluxReconstructor(mesh, spec, space)
    flux = recon.reconstruct(u_full, values)
    est = Estimator(mesh, spec, space, rt=recon.rt, tensors=recon.tensors)
    fields = est.residual_fields(u_full, values, flux.coeffs)
    etas = np.empty(len(values))
    terms = []
    for j, lam in enumerate(values):
        res = est.eta_simplified(u_full[:, j], lam, flux.coeffs[:, j],
                                 config.lambda1_lower)
        etas[j] = res.eta
        terms.append(est.element_terms(fields, j, config.lambda1_lower))
    return etas, local_indicators(terms)


def _report(values, etas, config):
    block = ApproxSpectrum(config.first, values[config.first - 1:],
                           etas)
    if config.mode == "combination":
        return combine(block)
    # a shift at or below the top approximate value separates nothing
    if config.nu > block.values[-1]:
        return fixed_shift_report(block, config.nu, config.nu_provenance)
    return weinstein_report(block, nu=config.nu)


def adapt(spec, config, mesh=None, snapshot_dir=None):
    """Solve, estimate, mark and refine until the dof budget is exceeded.

    The mesh that first exceeds the budget is still solved and reported,
    then the loop stops.  An eigensolver failure ends the run early with
    the failure recorded on the (possibly empty) trace.
    """
    config.require_shift()
    if mesh is None:
        mesh = build_mesh(spec.polygon, spec.side_tags())
    m = config.num_pairs
    mesh, space = _solvable_mesh(mesh, spec, m)
    trace = RunTrace()
    carry = None
    for iteration in range(1000000):
        t0 = time.perf_counter()
        forms = assemble_forms(mesh, spec, space)
        v0 = None
        if carry is not None:
            guess = carry[space.free]
            norm = np.linalg.norm(guess)
            if norm > 0 and np.isfinite(norm):
                v0 = guess
        try:
            solution = solve_lowest(forms.a, forms.b, m,
                                    tol=config.solver_tol,
                                    seed=config.seed, v0=v0)
        except EigensolveError as exc:
            trace.failure = str(exc)
            if not trace.entries:
                raise
            return trace
        etas, indicator = estimate_block(mesh, spec, space, solution, config)
        report = _report(solution.values, etas, config)
        trace.append(TraceEntry(iteration, space.num_free,
                                mesh.num_triangles, solution.values.copy(),
                                etas, report,
                                time.perf_counter() - t0))
        trace.final_mesh = mesh
        if snapshot_dir is not None:
            write_mesh(mesh, os.path.join(snapshot_dir,
                                          "mesh_%04d.txt" % iteration))
        if space.num_free > config.max_dofs:
            return trace
        marked = doerfler_mark(indicator, config.theta)
        if len(marked) == 0:
            marked = np.arange(mesh.num_triangles)
        carry = space.expand(solution.vectors[:, 0]) \
            if spec.degree == 1 else None
        mesh, space, carry = _refine(mesh, spec, marked, space, carry)
    raise DriverError("adaptive loop failed to exhaust its budget")


def single_run(spec, config):
    """One solve on the largest uniform refinement inside the dof budget.

    The coarsest solvable mesh is refined uniformly while the next level
    still fits ``config.max_dofs``, then solved, estimated and reported
    once.  Returns a one-entry trace, same shape as an adaptive run.
    """
    config.require_shift()
    m = config.num_pairs
    mesh = build_mesh(spec.polygon, spec.side_tags())
    mesh, space = _solvable_mesh(mesh, spec, m)
    while True:
        nxt = uniform_refine(mesh)
        nxt_space = build_space(nxt, spec)
        if nxt_space.num_free > config.max_dofs:
            break
        mesh, space = nxt, nxt_space
    t0 = time.perf_counter()
    forms = assemble_forms(mesh, spec, space)
    solution = solve_lowest(forms.a, forms.b, m, tol=config.solver_tol,
                            seed=config.seed)
    etas, _ = estimate_block(mesh, spec, space, solution, config)
    report = _report(solution.values, etas, config)
    trace = RunTrace()
    trace.append(TraceEntry(0, space.num_free, mesh.num_triangles,
                            solution.values.copy(), etas, report,
                            time.perf_counter() - t0))
    trace.final_mesh = mesh
    return trace


# -- analytic spectra --------------------------------------------------------


def rectangle_eigenvalues(lx, ly, count):
    """First Dirichlet Laplacian eigenvalues of (0, lx) x (0, ly).

    The spectrum is pi^2 (i^2/lx^2 + j^2/ly^2) over positive integer
    pairs; the tabulation grows until the tail cannot reorder the head.
    """
    if lx <= 0 or ly <= 0:
        raise DriverError("rectangle sides must be positive")
    if count < 1:
        raise DriverError("at least one eigenvalue must be requested")
    n = max(2, int(np.ceil(np.sqrt(count))) + 1)
    while True:
        i2 = np.arange(1, n + 1) ** 2
        vals = np.sort(np.add.outer(i2 / lx ** 2, i2 / ly ** 2),
                       axis=None) * np.pi ** 2
        excluded = np.pi ** 2 * min(
            (n + 1) ** 2 / lx ** 2 + 1 / ly ** 2,
            1 / lx ** 2 + (n + 1) ** 2 / ly ** 2)
        # strict separation so cross-boundary ties cannot drop multiplicity
        if vals[count - 1] < excluded * (1.0 - 1e-12):
            return vals[:count]
        n *= 2


def analytic_report(values, count, label="analytic"):
    """Exact-spectrum bounds report: upper equals lower, zero residual."""
    values = np.asarray(values, dtype=float)
    if count > len(values):
        raise DriverError(f"only {len(values)} analytic values tabulated")
    rows = [BoundRow(n=n, upper=float(values[n - 1]), eta=0.0,
                     weinstein=float(values[n - 1]), kato=None,
                     lower=float(values[n - 1]), nu=None,
                     nu_provenance=label, guaranteed=True, closeness=True)
            for n in range(1, count + 1)]
    gaps = [float(g) for g in values[1:count] / values[:count - 1]]
    return BoundsReport(rows=rows, mode="analytic", gaps=gaps, nu0=None)


# -- homotopy ----------------------------------------------------------------


@dataclass
class HomotopyStage:
    """One domain of the chain with its run settings.

    ``transfer_index`` names the eigenvalue whose lower bound seeds the
    next stage's shift; ``nu_override`` replaces that value by a manual
    (typically rounded-down) one, validated against the computed bound.
    Stage 0 is analytic: ``analytic`` holds the rectangle sides and
    ``count`` how many closed-form values to report.
    """

    spec: object
    config: AdaptiveConfig | None = None
    transfer_index: int | None = None
    nu_override: float | None = None
    analytic: tuple | None = None
    count: int | None = None
    label: str = ""


@dataclass
class HomotopyPlan:
    """Nested domain chain; stage k's polygon lies inside stage k-1's."""

    stages: list

    def __post_init__(self):
        if not self.stages:
            raise DriverError("a homotopy plan needs at least one stage")
        first = self.stages[0]
        if first.analytic is None:
            raise DriverError("stage 0 needs an analytic spectrum")
        if first.transfer_index is None and first.count is None:
            raise DriverError(
                "stage 0 needs a transfer index or an explicit count")
        for k, stage in enumerate(self.stages[:-1]):
            if stage.transfer_index is None:
                raise DriverError(f"stage {k} needs a transfer index")
            nxt = self.stages[k + 1]
            if nxt.config is None:
                raise DriverError(f"stage {k + 1} needs an adaptive config")
            if nxt.config.mode != "fixed-nu":
                raise DriverError(
                    f"stage {k + 1} must run in fixed-nu mode")
            # the shift must clear the next stage's whole computed block
            if nxt.config.last + 1 > stage.transfer_index:
                raise DriverError(
                    f"stage {k + 1} computes {nxt.config.last} values but "
                    f"stage {k} transfers index {stage.transfer_index}; "
                    "the shift would sit inside the computed block")
        self._check_nesting()

    def _check_nesting(self):
        for k in range(1, len(self.stages)):
            outer = self.stages[k - 1].spec.polygon
            inner = self.stages[k].spec.polygon
            span = np.ptp(outer, axis=0).max()
            inside = polygon_contains(outer, inner, tol=1e-9 * span)
            if not inside.all():
                bad = np.flatnonzero(~inside)[0]
                raise DriverError(
                    f"stage {k} vertex {tuple(inner[bad])} lies outside "
                    f"stage {k - 1}; the domains must be nested")


@dataclass
class StageResult:
    """Outcome of one stage: the shift used and what it produced."""

    label: str
    nu: float
    nu_provenance: str
    report: BoundsReport
    trace: RunTrace = None

    @property
    def gaps(self):
        return self.report.gaps


@dataclass
class HomotopyResult:
    stages: list

    @property
    def final_report(self):
        return self.stages[-1].report


def _transfer_value(stage, result, k):
    """Certified lower bound at the transfer index, or a vetted override."""
    row = result.report.row(stage.transfer_index)
    value = row.lower if row.guaranteed else row.kato
    if value is None:
        raise DriverError(
            f"stage {k} produced no certified bound at transfer index "
            f"{stage.transfer_index}; the chain cannot continue")
    if stage.nu_override is not None:
        if stage.nu_override > value:
            raise DriverError(
                f"stage {k} shift override {stage.nu_override:.12g} exceeds "
                f"the certified bound {value:.12g}")
        value = stage.nu_override
    return float(value)


def run_homotopy(plan, snapshot_dir=None):
    """Walk the nested chain, transferring certified shifts stage to stage.

    Stage 0 reports the analytic spectrum directly.  Every later stage
    runs the adaptive loop in fixed-nu mode; the first eigenvalue's
    analytic lower bound is threaded to every estimator call.
    """
    stage0 = plan.stages[0]
    wanted = [s.transfer_index + 1 for s in plan.stages
              if s.transfer_index is not None]
    wanted += [s.count for s in plan.stages if s.count is not None]
    count = stage0.count if stage0.count is not None \
        else stage0.transfer_index + 1
    analytic = rectangle_eigenvalues(*stage0.analytic, max(wanted))
    results = [StageResult(stage0.label or "stage 0", None, None,
                           analytic_report(analytic, count))]
    lam1 = float(analytic[0])
    nu = None
    provenance = None
    for k, stage in enumerate(plan.stages):
        if k > 0:
            config = stage.config
            if config.nu is not None:
                raise DriverError(
                    f"stage {k} config carries its own shift; chains "
                    "inject shifts via the previous stage's transfer")
            config.nu = nu
            config.nu_provenance = provenance
            if config.lambda1_lower is None:
                config.lambda1_lower = lam1
            sub_dir = None
            if snapshot_dir is not None:
                sub_dir = os.path.join(snapshot_dir, "stage_%d" % k)
                os.makedirs(sub_dir, exist_ok=True)
            trace = adapt(stage.spec, config, snapshot_dir=sub_dir)
            if trace.failure is not None:
                raise DriverError(
                    f"stage {k} eigensolver failed: {trace.failure}")
            report = trace.final.report
            if report.rows and report.rows[0].kato is None:
                raise DriverError(
                    f"stage {k} shift {nu:.12g} does not exceed the "
                    f"computed value {trace.final.values[-1]:.12g}; "
                    "the separation condition failed mid-chain")
            results.append(StageResult(stage.label or f"stage {k}", nu,
                                       provenance, report, trace))
        if k < len(plan.stages) - 1:
            nu = _transfer_value(stage, results[-1], k)
            # the first hop is certified by the closed formula, later
            # ones by the previous stage's certified report
            provenance = "analytic" if k == 0 else "homotopy"
    return HomotopyResult(results)


# -- plan files --------------------------------------------------------------


def _config_from_dict(data, mode):
    eigs = data.get("eigs", "1:1")
    try:
        first, last = (int(p) for p in str(eigs).split(":"))
    except ValueError:
        raise DriverError(f"eigs must look like 'r:s', got {eigs!r}")
    return AdaptiveConfig(
        first=first, last=last,
        theta=float(data.get("theta", 0.5)),
        max_dofs=int(data.get("max_dofs", 100000)),
        mode=mode,
        nu=data.get("nu"),
        nu_provenance=data.get("nu_provenance",
                               "user" if "nu" in data else None),
        lambda1_lower=data.get("lambda1_lower"),
        solver_tol=float(data.get("solver_tol", 1e-9)),
        seed=int(data.get("seed", 0)))


def load_plan(path):
    """Read a TOML homotopy plan; problem paths resolve beside the file."""
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise DriverError(f"{path}: {exc}") from exc
    entries = data.get("stage")
    if not entries:
        raise DriverError(f"{path}: no [[stage]] entries")
    base = os.path.dirname(os.path.abspath(path))
    stages = []
    for k, entry in enumerate(entries):
        if "problem" not in entry:
            raise DriverError(f"{path}: stage {k} needs a 'problem' path")
        spec = load_problem(os.path.join(base, entry["problem"]))
        analytic = None
        config = None
        if k == 0:
            rect = entry.get("rectangle")
            if rect is None:
                raise DriverError(
                    f"{path}: stage 0 needs 'rectangle = [lx, ly]'")
            analytic = (float(rect[0]), float(rect[1]))
        else:
            config = _config_from_dict(entry, "fixed-nu")
            # the chain injects the transferred shift at run time
            config.nu = None
            config.nu_provenance = None
        transfer = entry.get("transfer_index")
        count = entry.get("count")
        stages.append(HomotopyStage(
            spec=spec, config=config,
            transfer_index=None if transfer is None else int(transfer),
            nu_override=entry.get("nu"),
            analytic=analytic,
            count=None if count is None else int(count),
            label=str(entry.get("label", f"stage {k}"))))
    return HomotopyPlan(stages)
