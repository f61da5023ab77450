"""Newton solver and pseudo-arclength continuation of steady states.

The extended unknown is ``z = (y, lam)`` with ``lam`` the continuation
parameter.  Arclength is measured in the weighted inner product
``<u, v> = u_y . v_y / n_cells + u_lam v_lam``, i.e. the state is scaled by
``1/sqrt(n_cells)`` so that growth of the state norm does not starve the
parameter component of the tangent.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    AuxinError,
    NoConvergenceError,
    NumericalError,
    SingularJacobianError,
)
from .model import (
    ModelDefinition,
    assemble_jacobian,
    assemble_param_derivative,
    assemble_residual,
    auxin_norm,
)
from .tissue import TissueGraph

log = logging.getLogger(__name__)

__all__ = [
    "SteadyProblem",
    "NewtonSettings",
    "NewtonResult",
    "ContinuationSettings",
    "BranchPoint",
    "Branch",
    "FoldEvent",
    "PreconditionError",
    "newton",
    "newton_solve",
    "continue_branch",
    "detect_folds",
    "point_on_segment",
    "snaking_width",
    "sweep",
]


class PreconditionError(NumericalError):
    pass


class SteadyProblem:
    """Residual, Jacobian and parameter derivative of a model on a tissue.

    ``param`` names the continuation parameter.  ``T`` is handled
    analytically; any other :class:`ModelParams` field is handled by
    rebuilding the model and differentiating the residual numerically.
    """

    def __init__(self, model: ModelDefinition, tissue: TissueGraph, param: str = "T"):
        self.model = model
        self.tissue = tissue
        self.param = param
        self.n_cells = tissue.n
        self.size = model.m * tissue.n
        getattr(model.params, param)
        self._cache = {}

    def _model_at(self, value):
        if self.param == "T":
            return self.model
        key = float(value)
        if key not in self._cache:
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[key] = self.model.with_params(**{self.param: key})
        return self._cache[key]

    def value(self) -> float:
        return float(getattr(self.model.params, self.param))

    def residual(self, y, value):
        if self.param == "T":
            return assemble_residual(self.model, self.tissue, y, T=value)
        return assemble_residual(self._model_at(value), self.tissue, y)

    def jacobian(self, y, value):
        if self.param == "T":
            return assemble_jacobian(self.model, self.tissue, y, T=value)
        return assemble_jacobian(self._model_at(value), self.tissue, y)

    def dparam(self, y, value):
        if self.param == "T":
            return assemble_param_derivative(self.model, self.tissue, y)
        h = 1e-6 * (1.0 + abs(value))
        lo = max(value - h, 0.0)
        return (self.residual(y, value + h) - self.residual(y, lo)) / (value + h - lo)

    def measure(self, y) -> float:
        return auxin_norm(self.model, y)

    def model_at(self, value) -> ModelDefinition:
        return self.model.with_params(**{self.param: float(value)})


@dataclass
class NewtonSettings:
    tol_residual: float = 1e-10
    tol_step: float = 1e-12
    max_iters: int = 25
    damping: str = "backtrack"  # or "none"

    def __post_init__(self):
        if not (self.tol_residual > 0 and self.tol_step > 0 and self.max_iters >= 1):
            raise ValueError("tolerances must be positive and max_iters >= 1")
        if self.damping not in ("none", "backtrack"):
            raise ValueError(f"unknown damping policy {self.damping!r}")


@dataclass
class NewtonResult:
    state: np.ndarray
    iterations: int
    residual_norm: float
    negative: bool = False


def _factor(J):
    try:
        lu = spla.splu(sp.csc_matrix(J))
    except RuntimeError as exc:
        raise SingularJacobianError(f"singular Jacobian: {exc}") from None
    return lu


def _inf(v):
    return float(np.max(np.abs(v))) if v.size else 0.0


def newton(problem: SteadyProblem, y0, value: float, settings: NewtonSettings | None = None) -> NewtonResult:
    s = settings or NewtonSettings()
    y = np.array(y0, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("initial state is not finite")
    R = problem.residual(y, value)
    rn = _inf(R)
    best = (rn, y.copy())
    for it in range(1, s.max_iters + 1):
        if rn < s.tol_residual:
            return NewtonResult(y, it - 1, rn, bool(np.any(y < -1e-8)))
        dy = _factor(problem.jacobian(y, value)).solve(-R)
        if not np.all(np.isfinite(dy)):
            raise SingularJacobianError("Newton step is not finite")
        lam = 1.0
        while True:
            y_new = y + lam * dy
            try:
                R_new = problem.residual(y_new, value)
                rn_new = _inf(R_new)
            except AuxinError:
                rn_new = math.inf
            if s.damping == "none" or rn_new < rn or lam < 1e-4:
                break
            lam *= 0.5
        y, R, rn = y_new, R_new, rn_new
        if rn < best[0]:
            best = (rn, y.copy())
        if _inf(lam * dy) < s.tol_step * (1.0 + _inf(y)) and rn < s.tol_residual:
            break
    if rn < s.tol_residual:
        return NewtonResult(y, s.max_iters, rn, bool(np.any(y < -1e-8)))
    raise NoConvergenceError(
        f"Newton did not converge in {s.max_iters} iterations (|R|={best[0]:.3e})",
        best=best[1],
        residual_norm=best[0],
        iterations=s.max_iters,
    )


def newton_solve(
    model: ModelDefinition,
    tissue: TissueGraph,
    initial,
    T: float | None = None,
    settings: NewtonSettings | None = None,
) -> NewtonResult:
    """Solve for a steady state at ``T`` (default: the model's own ``T``)."""
    problem = SteadyProblem(model, tissue, "T")
    return newton(problem, initial, model.params.T if T is None else T, settings)


# -- continuation ------------------------------------------------------------

@dataclass
class ContinuationSettings:
    ds0: float = 1e-3
    ds_min: float = 1e-5
    ds_max: float = 5e-2
    grow: float = 1.3
    shrink: float = 0.5
    fast_iters: int = 3
    corrector_iters: int = 8
    tol_residual: float = 1e-10
    tol_step: float = 1e-8
    max_points: int = 20000
    continuity: float = 10.0
    min_cosine: float = 0.2
    max_correction: float = 0.5  # corrector distance from predictor, relative to ds
    max_state_change: float = 0.25  # largest change of any unknown in one step
    stability: bool = True
    eig_mode: str = "auto"
    max_measure: float | None = None
    max_folds: int | None = None  # stop after this many turning points

    def __post_init__(self):
        if not 0 < self.ds_min <= self.ds0 <= self.ds_max:
            raise ValueError("need 0 < ds_min <= ds0 <= ds_max")


@dataclass
class BranchPoint:
    param: float
    state: np.ndarray
    measure: float
    tangent: np.ndarray
    ds: float = 0.0
    residual_norm: float = 0.0
    iterations: int = 0
    stability: str = "unknown"
    n_unstable_real: int = -1
    n_unstable_complex: int = -1
    rightmost: complex | None = None
    events: list = field(default_factory=list)

    @property
    def T(self) -> float:
        return self.param


@dataclass
class FoldEvent:
    param: float
    index: int
    kind: str  # "right" (parameter maximum) or "left" (parameter minimum)
    state: np.ndarray
    measure: float


@dataclass
class Branch:
    points: list
    meta: dict = field(default_factory=dict)
    reason: str = ""
    folds: list = field(default_factory=list)
    hopfs: list = field(default_factory=list)

    @property
    def params(self) -> np.ndarray:
        return np.array([p.param for p in self.points])

    @property
    def measures(self) -> np.ndarray:
        return np.array([p.measure for p in self.points])

    def __len__(self):
        return len(self.points)


class _Stepper:
    """Predictor-corrector machinery shared by continuation and event refinement."""

    def __init__(self, problem: SteadyProblem, settings: ContinuationSettings):
        self.problem = problem
        self.s = settings
        self.w = 1.0 / problem.n_cells

    def dot(self, u, v):
        return self.w * float(u[:-1] @ v[:-1]) + float(u[-1] * v[-1])

    def norm(self, u):
        return math.sqrt(self.dot(u, u))

    def bordered(self, y, lam, t):
        J = self.problem.jacobian(y, lam)
        g = self.problem.dparam(y, lam)
        A = sp.bmat([
            [J, sp.csc_matrix(g.reshape(-1, 1))],
            [sp.csr_matrix(self.w * t[:-1].reshape(1, -1)), sp.csr_matrix([[t[-1]]])],
        ])
        return _factor(A)

    def initial_tangent(self, y, lam, direction):
        J = self.problem.jacobian(y, lam)
        g = self.problem.dparam(y, lam)
        ty = _factor(J).solve(-g)
        t = np.concatenate([ty, [1.0]]) * direction
        return t / self.norm(t)

    def tangent(self, y, lam, t_prev, lu=None):
        lu = lu or self.bordered(y, lam, t_prev)
        rhs = np.zeros(y.size + 1)
        rhs[-1] = 1.0
        t = lu.solve(rhs)
        return t / self.norm(t)

    def correct(self, z0, t0, ds):
        """Newton on the bordered system from the predictor ``z0 + ds t0``."""
        z = z0 + ds * t0
        s = self.s
        for it in range(1, s.corrector_iters + 1):
            y, lam = z[:-1], z[-1]
            R = self.problem.residual(y, lam)
            arc = self.dot(t0, z - z0) - ds
            rn = _inf(R)
            if rn < s.tol_residual and abs(arc) < s.tol_step and it > 1:
                return z, it - 1, rn
            lu = self.bordered(y, lam, t0)
            dz = lu.solve(-np.concatenate([R, [arc]]))
            if not np.all(np.isfinite(dz)):
                raise SingularJacobianError("non-finite corrector step")
            z = z + dz
        y, lam = z[:-1], z[-1]
        R = self.problem.residual(y, lam)
        arc = self.dot(t0, z - z0) - ds
        rn = _inf(R)
        if rn < s.tol_residual and abs(arc) < s.tol_step:
            return z, s.corrector_iters, rn
        raise NoConvergenceError(f"corrector failed (|R|={rn:.2e})", best=z, residual_norm=rn)


def _classify(problem, y, lam, mode):
    from .spectra import spectrum_of_matrix

    J = problem.jacobian(y, lam)
    rep = spectrum_of_matrix(J, mode=mode, m=problem.model.m, want_vectors=False)
    return rep


def _make_point(stepper, z, t, ds, rn, iters, stability):
    y, lam = z[:-1].copy(), float(z[-1])
    pt = BranchPoint(lam, y, stepper.problem.measure(y), t.copy(), ds, rn, iters)
    if stability:
        rep = _classify(stepper.problem, y, lam, stepper.s.eig_mode)
        pt.stability = rep.stability
        pt.n_unstable_real = rep.n_unstable_real
        pt.n_unstable_complex = rep.n_unstable_complex
        pt.rightmost = complex(rep.rightmost)
    return pt


def _land_on_bound(stepper, z, t, z_over, t_over, bound, fallback):
    """Re-solve the step that crossed ``bound`` so the branch ends exactly on it.

    Keeps the overshooting point when the natural-parameter solve fails.
    """
    frac = (bound - z[-1]) / (z_over[-1] - z[-1])
    guess = z[:-1] + frac * (z_over[:-1] - z[:-1])
    try:
        res = newton(stepper.problem, guess, bound, NewtonSettings(tol_residual=stepper.s.tol_residual))
        z_end = np.concatenate([res.state, [bound]])
        t_end = stepper.tangent(res.state, bound, t_over)
    except NumericalError:
        return (z_over, t_over) + fallback
    ds = stepper.dot(t, z_end - z)
    if ds <= 0 or stepper.dot(t, t_end) < stepper.s.min_cosine:
        return (z_over, t_over) + fallback
    return z_end, t_end, ds, res.residual_norm, res.iterations


def continue_branch(
    model_or_problem,
    tissue: TissueGraph | None = None,
    start=None,
    param_range: tuple[float, float] = (0.0, 1.0),
    settings: ContinuationSettings | None = None,
    param: str = "T",
) -> Branch:
    """Follow a branch of steady states from ``start`` at ``param_range[0]``.

    Accepts either ``(model, tissue, ...)`` or a ready-made problem object
    exposing ``residual``, ``jacobian``, ``dparam``, ``measure``, ``n_cells``.
    """
    s = settings or ContinuationSettings()
    if isinstance(model_or_problem, ModelDefinition):
        problem = SteadyProblem(model_or_problem, tissue, param)
    else:
        problem = model_or_problem
    lo, hi = float(param_range[0]), float(param_range[1])
    direction = 1.0 if hi >= lo else -1.0
    stepper = _Stepper(problem, s)

    try:
        first = newton(problem, start, lo, NewtonSettings(tol_residual=s.tol_residual, max_iters=10))
    except (NoConvergenceError, SingularJacobianError) as exc:
        raise PreconditionError(f"start state is not a steady state at {param}={lo}: {exc}") from None
    y0 = first.state
    t = stepper.initial_tangent(y0, lo, direction)
    z = np.concatenate([y0, [lo]])
    points = [_make_point(stepper, z, t, 0.0, first.residual_norm, first.iterations, s.stability)]
    meta = {
        "param": getattr(problem, "param", param),
        "range": [lo, hi],
        "model": getattr(getattr(problem, "model", None), "name", None),
        "tissue": getattr(getattr(problem, "tissue", None), "digest", lambda: None)(),
    }

    ds = s.ds0
    reason = "max-points"
    failures = 0
    n_folds = 0
    while len(points) < s.max_points:
        try:
            z_new, iters, rn = stepper.correct(z, t, ds)
            t_new = stepper.tangent(z_new[:-1], z_new[-1], t)
            cos = stepper.dot(t, t_new)
            jump = stepper.norm(z_new - z)
            if cos < s.min_cosine:
                raise NoConvergenceError(f"tangent turned too sharply (cos={cos:.3f})")
            if jump > s.continuity * ds:
                raise NoConvergenceError(f"corrector jumped {jump:.3e} for ds={ds:.3e}")
            corr = stepper.norm(z_new - z - ds * t)
            if corr > s.max_correction * ds and ds > s.ds_min:
                raise NoConvergenceError(f"corrector moved {corr:.3e} off the predictor (ds={ds:.3e})")
            if _inf(z_new[:-1] - z[:-1]) > s.max_state_change and ds > s.ds_min:
                raise NoConvergenceError("state changed too much in one step")
        except NumericalError as exc:
            failures += 1
            ds *= s.shrink
            log.debug("step rejected at %s=%.6g: %s; ds -> %.3e", meta["param"], z[-1], exc, ds)
            if ds < s.ds_min:
                reason = f"step-size underflow: {exc}"
                break
            continue
        failures = 0
        step = ds
        if (z_new[-1] - hi) * direction > 0 and t_new[-1] * direction > 0:
            z_new, t_new, step, rn, iters = _land_on_bound(stepper, z, t, z_new, t_new, hi, (step, rn, iters))
        pt = _make_point(stepper, z_new, t_new, step, rn, iters, s.stability)
        points.append(pt)
        if t[-1] * t_new[-1] < 0:
            n_folds += 1
        z, t = z_new, t_new
        if s.max_folds is not None and n_folds >= s.max_folds:
            reason = "fold-limit"
            break
        if (z[-1] - hi) * direction >= 0:
            reason = "parameter-bound"
            break
        if (z[-1] - lo) * direction < 0:
            reason = "returned-below-start"
            break
        if s.max_measure is not None and pt.measure > s.max_measure:
            reason = "measure-bound"
            break
        if iters <= s.fast_iters:
            ds = min(ds * s.grow, s.ds_max)
    branch = Branch(points, meta, reason)
    log.info("branch finished with %d points (%s)", len(points), reason)
    return branch


# -- events -----------------------------------------------------------------

def point_on_segment(problem, branch: Branch, k: int, s: float, settings: ContinuationSettings | None = None):
    """Re-solve the point at arclength ``s`` past ``branch.points[k]``.

    Returns ``(state, param, tangent)``.
    """
    st = _Stepper(problem, settings or ContinuationSettings())
    p = branch.points[k]
    z0 = np.concatenate([p.state, [p.param]])
    if s == 0:
        return p.state.copy(), p.param, p.tangent.copy()
    z, _, _ = st.correct(z0, p.tangent, s)
    t = st.tangent(z[:-1], z[-1], p.tangent)
    return z[:-1], float(z[-1]), t


def detect_folds(
    branch: Branch,
    problem: SteadyProblem | None = None,
    tol: float = 1e-4,
    max_iters: int = 40,
) -> list[FoldEvent]:
    """Locate turning points from sign changes of the tangent's parameter part.

    With a ``problem`` the location is refined by regula falsi in arclength
    until successive parameter estimates differ by less than ``tol``;
    otherwise the sign-change point with the extreme parameter is reported.
    """
    pts = branch.points
    folds = []
    for k in range(len(pts) - 1):
        f0, f1 = pts[k].tangent[-1], pts[k + 1].tangent[-1]
        if f0 * f1 >= 0 or f0 == 0:
            continue
        kind = "right" if f0 > 0 else "left"
        if problem is None:
            j = k if (pts[k].param > pts[k + 1].param) == (kind == "right") else k + 1
            folds.append(FoldEvent(pts[j].param, k, kind, pts[j].state, pts[j].measure))
            continue
        a, b = 0.0, pts[k + 1].ds
        fa, fb = f0, f1
        side = 0
        lam_prev = math.inf
        y, lam = pts[k].state, pts[k].param
        for _ in range(max_iters):
            s = (a * fb - b * fa) / (fb - fa)
            try:
                y, lam, t = point_on_segment(problem, branch, k, s)
            except AuxinError:
                s = 0.5 * (a + b)
                y, lam, t = point_on_segment(problem, branch, k, s)
            fs = t[-1]
            if abs(lam - lam_prev) < tol and abs(b - a) < 1e-3 * pts[k + 1].ds + 1e-12:
                break
            if abs(fs) < 1e-12:
                break
            if fs * fa > 0:
                a, fa = s, fs
                if side == -1:
                    fb *= 0.5
                side = -1
            else:
                b, fb = s, fs
                if side == 1:
                    fa *= 0.5
                side = 1
            if abs(lam - lam_prev) < tol:
                break
            lam_prev = lam
        folds.append(FoldEvent(float(lam), k, kind, y, problem.measure(y)))
    for ev in folds:
        pts[ev.index].events.append(("fold", ev.param))
    branch.folds = folds
    return folds


def snaking_width(folds: list[FoldEvent], pairs: int = 1) -> float:
    """Mean parameter width of the leading fold pairs after the first turning point.

    The first right fold bounds the small-amplitude branch and is skipped;
    each later left fold is paired with the right fold that follows it.
    Returns 0 for branches without snaking.
    """
    widths = []
    seq = list(folds)
    for k in range(1, len(seq) - 1):
        if seq[k].kind == "left" and seq[k + 1].kind == "right":
            widths.append(seq[k + 1].param - seq[k].param)
        if len(widths) == pairs:
            break
    return float(np.mean(widths)) if widths else 0.0


def sweep(
    model: ModelDefinition,
    tissue: TissueGraph,
    sweep_param: str,
    values,
    param_range: tuple[float, float],
    settings: ContinuationSettings | None = None,
    start_factory=None,
    workers: int = 1,
    refine_folds: bool = True,
) -> list:
    """One continuation per value of ``sweep_param``; failures are isolated.

    Returns a list, in input order, of :class:`Branch` objects or the
    exception raised for that value.
    """
    from .asymptotics import homogeneous_state

    vals = [float(v) for v in values]
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("sweep values must be finite")

    def run_one(v):
        try:
            mdl = model.with_params(**{sweep_param: v, "T": param_range[0]})
            if start_factory is not None:
                y0 = start_factory(mdl, tissue)
            else:
                y0 = np.tile(homogeneous_state(mdl).y_star, tissue.n)
            br = continue_branch(mdl, tissue, y0, param_range, settings)
            br.meta[sweep_param] = v
            if refine_folds:
                detect_folds(br, SteadyProblem(mdl, tissue, "T"))
            else:
                detect_folds(br)
            return br
        except AuxinError as exc:
            log.warning("sweep value %s=%g failed: %s", sweep_param, v, exc)
            return exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(run_one, vals))
    return [run_one(v) for v in vals]
