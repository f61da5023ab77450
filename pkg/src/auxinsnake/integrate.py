"""Stiff time integration and periodic-state detection.

The integrator is a one-step TR-BDF2 scheme (trapezoidal stage to
``t + gamma h`` followed by a BDF2 stage to ``t + h``, ``gamma = 2 - sqrt 2``).
Both stages share the iteration matrix ``I - d h J`` so one sparse LU serves
a whole step.  The local error is estimated from the third divided
difference of the stage derivatives and filtered through the same LU,
which keeps the estimate bounded on stiff components.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.signal import correlate

from .errors import EvaluationError, NumericalError, StepSizeUnderflowError, ValidationError
from .model import ModelDefinition, assemble_jacobian, assemble_residual
from .tissue import TissueGraph

log = logging.getLogger(__name__)

__all__ = [
    "IntegratorSettings",
    "TrajectorySample",
    "Trajectory",
    "PeriodEstimate",
    "PeriodicResult",
    "iter_integrate",
    "integrate",
    "integrate_ode",
    "find_periodic_state",
    "estimate_period",
    "peak_times",
    "wave_arrival_times",
]

GAMMA = 2.0 - math.sqrt(2.0)
D = GAMMA / 2.0
# BDF2 stage: y1 - d h f(y1) = A z + B y0
_A = 1.0 / (GAMMA * (2.0 - GAMMA))
_B = -((1.0 - GAMMA) ** 2) / (GAMMA * (2.0 - GAMMA))
# leading local truncation error constant (times h^3 y''')
_LTE = (-3.0 * GAMMA**2 + 4.0 * GAMMA - 2.0) / (12.0 * (2.0 - GAMMA))


@dataclass
class IntegratorSettings:
    rtol: float = 1e-6
    atol: float = 1e-9
    h0: float | None = None
    h_min: float = 1e-10
    h_max: float = math.inf
    fixed_step: float | None = None
    newton_tol: float = 0.01  # in units of the local error tolerance
    newton_iters: int = 10
    max_steps: int = 10_000_000
    stride: int = 1  # keep every stride-th accepted step
    sample_dt: float | None = None  # uniform output grid (Hermite dense output) instead of steps
    positivity_tol: float = 1e-8

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValidationError("rtol and atol must be positive")
        if self.fixed_step is not None and self.fixed_step <= 0:
            raise ValidationError("fixed_step must be positive")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")


@dataclass
class TrajectorySample:
    t: float
    state: np.ndarray


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray  # (samples, N)
    status: str = "ok"
    n_steps: int = 0
    n_rejected: int = 0
    n_jac: int = 0
    positivity_violations: list = field(default_factory=list)  # (t, min value, index)
    events: list = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def positive(self) -> bool:
        return not self.positivity_violations

    def component(self, m: int, k: int = 0) -> np.ndarray:
        """Per-cell time series of component ``k`` as ``(samples, n_cells)``."""
        return self.states.reshape(len(self.t), -1, m)[:, :, k]


class _Stats:
    def __init__(self):
        self.steps = 0
        self.rejected = 0
        self.jac = 0
        self.positivity = []
        self.events = []


def _hermite(t0, y0, f0, t1, y1, f1, t):
    h = t1 - t0
    s = (t - t0) / h
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


def _steps(
    fun: Callable[[np.ndarray], np.ndarray],
    jac: Callable[[np.ndarray], sp.spmatrix],
    y0: np.ndarray,
    t0: float,
    t1: float,
    s: IntegratorSettings,
    stats: _Stats,
) -> Iterator[tuple[float, np.ndarray, np.ndarray, float, np.ndarray, np.ndarray]]:
    """Yield accepted steps as ``(t_old, y_old, f_old, t_new, y_new, f_new)``."""
    N = y0.size
    eye = sp.identity(N, format="csc")
    t, y = t0, y0.copy()
    f = fun(y)
    fixed = s.fixed_step is not None

    def wnorm(v, ref):
        w = s.atol + s.rtol * np.maximum(np.abs(ref), np.abs(y))
        return float(np.sqrt(np.mean((v / w) ** 2)))

    if fixed:
        h = s.fixed_step
    elif s.h0 is not None:
        h = s.h0
    else:
        d0 = wnorm(y, y)
        d1 = wnorm(f, y)
        h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        h = min(h, s.h_max, t1 - t0)
    J = None
    lu = None
    lu_h = None
    while t < t1:
        if stats.steps >= s.max_steps:
            raise NumericalError(f"maximum number of steps ({s.max_steps}) reached at t={t:.6g}")
        h = min(h, t1 - t)
        if t + h >= t1 - 1e-12 * max(1.0, abs(t1)):
            h = t1 - t
        if not fixed and h < s.h_min and t1 - t > s.h_min:
            raise StepSizeUnderflowError(f"step size underflow at t={t:.6g} (h={h:.3e})", t=t, y=y.copy())
        if J is None:
            J = sp.csc_matrix(jac(y))
            stats.jac += 1
            lu = None
        if lu is None or lu_h != h:
            try:
                lu = spla.splu(sp.csc_matrix(eye - (D * h) * J))
                lu_h = h
            except RuntimeError:
                lu = None
                h *= 0.25
                stats.rejected += 1
                continue
        ok, z, fz, y1, f1 = _stage_pair(fun, lu, y, f, h, s, wnorm)
        if not ok:
            stats.rejected += 1
            if fixed:
                raise NumericalError(f"implicit stage failed to converge at t={t:.6g} with fixed step {h:.3e}")
            J = None  # refresh the Jacobian before retrying
            h *= 0.25
            continue
        if fixed:
            err = 0.0
        else:
            # third derivative from the divided differences of f at t, t + gamma h, t + h
            d01 = (fz - f) / (GAMMA * h)
            d12 = (f1 - fz) / ((1.0 - GAMMA) * h)
            ypp = 2.0 * (d12 - d01) / h
            est = lu.solve(_LTE * h**3 * ypp)
            err = wnorm(est, y1)
        if err > 1.0:
            stats.rejected += 1
            h *= max(0.2, 0.9 * err ** (-1.0 / 3.0))
            continue
        stats.steps += 1
        yield t, y, f, t + h, y1, f1
        t, y, f = t + h, y1, f1
        if fixed:
            J = None
        else:
            fac = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** (-1.0 / 3.0)))
            # keep the factorisation when the change would be small
            if 1.0 <= fac < 1.2:
                fac = 1.0
            h = min(h * fac, s.h_max)
            J = None if fac != 1.0 else J


def _stage_pair(fun, lu, y, f, h, s, wnorm):
    """Solve the TR and BDF2 stages by simplified Newton; returns (ok, z, fz, y1, f1)."""
    dh = D * h
    try:
        rhs = y + dh * f
        z = y + GAMMA * h * f
        z, fz, ok = _newton_stage(fun, lu, z, rhs, dh, s, wnorm)
        if not ok:
            return False, None, None, None, None
        rhs = _A * z + _B * y
        # extrapolate through y, z for the predictor
        y1 = y + (z - y) / GAMMA
        y1, f1, ok = _newton_stage(fun, lu, y1, rhs, dh, s, wnorm)
        return ok, z, fz, y1, f1
    except EvaluationError:
        return False, None, None, None, None


def _newton_stage(fun, lu, x, rhs, dh, s, wnorm):
    rate_prev = None
    dnorm_prev = None
    # fixed steps have no step-size fallback, so iterate longer
    iters = max(s.newton_iters, 50) if s.fixed_step is not None else s.newton_iters
    for _ in range(iters):
        fx = fun(x)
        G = x - dh * fx - rhs
        dx = lu.solve(-G)
        if not np.all(np.isfinite(dx)):
            return x, fx, False
        x = x + dx
        if np.max(np.abs(dx)) <= 8 * np.finfo(float).eps * max(1.0, np.max(np.abs(x))):
            return x, fun(x), True
        dnorm = wnorm(dx, x)
        if dnorm_prev is not None and dnorm_prev > 0:
            rate = dnorm / dnorm_prev
            if rate >= 1.0:
                return x, fx, False
            if rate / (1.0 - rate) * dnorm < s.newton_tol:
                return x, fun(x), True
            rate_prev = rate
        if dnorm < 1e-3 * s.newton_tol or (rate_prev is None and dnorm == 0.0):
            return x, fun(x), True
        dnorm_prev = dnorm
    return x, fun(x), False


def _ode_iter(fun, jac, y0, t_span, settings, on_step=None):
    s = settings or IntegratorSettings()
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValidationError("t_span must be increasing")
    y0 = np.asarray(y0, dtype=float).copy()
    if not np.all(np.isfinite(y0)):
        raise ValidationError("initial state must be finite")
    stats = _Stats()
    yield TrajectorySample(t0, y0.copy())
    next_out = t0 + s.sample_dt if s.sample_dt else None
    k = 0
    excursion = False
    for ta, ya, fa, tb, yb, fb in _steps(fun, jac, y0, t0, t1, s, stats):
        lo = float(yb.min())
        if lo < -s.positivity_tol:
            if not excursion:
                i = int(np.argmin(yb))
                stats.positivity.append((tb, lo, i))
                log.warning("negative component %d (%.3e) at t=%.6g", i, lo, tb)
            excursion = True
        else:
            excursion = False
        if on_step is not None:
            on_step(stats)
        if s.sample_dt:
            while next_out is not None and next_out <= tb + 1e-12 * max(1.0, abs(tb)):
                yield TrajectorySample(next_out, _hermite(ta, ya, fa, tb, yb, fb, next_out))
                next_out += s.sample_dt
                if next_out > t1 + 1e-12 * max(1.0, abs(t1)):
                    next_out = None
        else:
            k += 1
            if k % s.stride == 0 or tb >= t1:
                yield TrajectorySample(tb, yb.copy())
    _ode_iter.last_stats = stats


def _collect(samples_iter, status_holder):
    ts, ys = [], []
    try:
        for smp in samples_iter:
            ts.append(smp.t)
            ys.append(smp.state)
    except StepSizeUnderflowError as exc:
        status_holder["status"] = "step-size-underflow"
        status_holder["error"] = exc
    return ts, ys


def integrate_ode(
    fun: Callable[[np.ndarray], np.ndarray],
    jac: Callable[[np.ndarray], sp.spmatrix],
    y0,
    t_span: tuple[float, float],
    settings: IntegratorSettings | None = None,
    raise_on_underflow: bool = True,
) -> Trajectory:
    """Integrate the autonomous system ``y' = fun(y)`` with TR-BDF2."""
    holder: dict = {"status": "ok"}
    stats_box = {}

    def keep(stats):
        stats_box["s"] = stats

    ts, ys = _collect(_ode_iter(fun, jac, y0, t_span, settings, on_step=keep), holder)
    st = stats_box.get("s", _Stats())
    if holder["status"] != "ok" and raise_on_underflow:
        exc = holder["error"]
        raise StepSizeUnderflowError(str(exc), t=exc.t, y=exc.y)
    traj = Trajectory(
        np.array(ts),
        np.array(ys),
        holder["status"],
        st.steps,
        st.rejected,
        st.jac,
        list(st.positivity),
        list(st.events),
    )
    if holder["status"] != "ok":
        traj.events.append(("abort", str(holder["error"])))
    return traj


def _model_funcs(model, tissue, T):
    def fun(y):
        return assemble_residual(model, tissue, y, T=T)

    def jac(y):
        return assemble_jacobian(model, tissue, y, T=T)

    return fun, jac


def iter_integrate(
    model: ModelDefinition,
    tissue: TissueGraph,
    y0,
    t_span: tuple[float, float],
    settings: IntegratorSettings | None = None,
    T: float | None = None,
) -> Iterator[TrajectorySample]:
    """Stream of trajectory samples; raises on step-size underflow."""
    fun, jac = _model_funcs(model, tissue, T)
    y0 = np.asarray(y0, dtype=float)
    if y0.size != tissue.n * model.m:
        raise ValidationError(f"state has {y0.size} entries, expected {tissue.n * model.m}")
    yield from _ode_iter(fun, jac, y0, t_span, settings)


def integrate(
    model: ModelDefinition,
    tissue: TissueGraph,
    y0,
    t_span: tuple[float, float],
    settings: IntegratorSettings | None = None,
    T: float | None = None,
    raise_on_underflow: bool = False,
) -> Trajectory:
    """Integrate the tissue ODE system.

    On step-size underflow the trajectory up to the last valid state is
    returned with ``status='step-size-underflow'`` unless
    ``raise_on_underflow`` is set.
    """
    y0 = np.asarray(y0, dtype=float)
    if y0.size != tissue.n * model.m:
        raise ValidationError(f"state has {y0.size} entries, expected {tissue.n * model.m}")
    fun, jac = _model_funcs(model, tissue, T)
    return integrate_ode(fun, jac, y0, t_span, settings, raise_on_underflow=raise_on_underflow)


# -- periodic states ---------------------------------------------------------

@dataclass
class PeriodEstimate:
    period: float
    spread: float  # (max - min) / mean of successive cycle lengths
    n_cycles: int
    observable: str
    peak_times: np.ndarray

    def __post_init__(self):
        if not self.period > 0:
            raise ValueError("period must be positive")


@dataclass
class PeriodicResult:
    found: bool
    estimate: PeriodEstimate | None
    cycle: Trajectory | None
    T: float
    reason: str = ""
    trajectory: Trajectory | None = None
    meta: dict = field(default_factory=dict)


def peak_times(t: np.ndarray, x: np.ndarray, prominence: float = 0.0) -> np.ndarray:
    """Times of local maxima of a sampled signal, refined by a parabola through three samples."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    idx = np.flatnonzero((x[1:-1] > x[:-2]) & (x[1:-1] >= x[2:])) + 1
    if prominence > 0:
        idx = idx[x[idx] - np.min(x) >= prominence]
    out = []
    for i in idx:
        t0, t1, t2 = t[i - 1], t[i], t[i + 1]
        x0, x1, x2 = x[i - 1], x[i], x[i + 1]
        denom = (t0 - t1) * (t0 - t2) * (t1 - t2)
        A = (t2 * (x1 - x0) + t1 * (x0 - x2) + t0 * (x2 - x1)) / denom
        B = (t2**2 * (x0 - x1) + t1**2 * (x2 - x0) + t0**2 * (x1 - x2)) / denom
        out.append(-B / (2 * A) if A < 0 else t1)
    return np.array(out)


def _fundamental_lag(d: np.ndarray, rtol: float) -> int | None:
    """Smallest ``k`` such that the interval sequence repeats with lag ``k``."""
    for k in range(1, d.size // 2 + 1):
        if np.max(np.abs(d[k:] - d[:-k])) <= rtol * np.mean(d[: 2 * k]) * k:
            return k
    return None


def estimate_period(
    t: np.ndarray,
    x: np.ndarray,
    observable: str = "a",
    rel_variance_tol: float = 1e-8,
    min_cycles: int = 2,
    repeat_rtol: float = 0.02,
) -> PeriodEstimate | None:
    """Period from successive maxima; ``None`` if the signal does not oscillate.

    A cycle may contain several maxima of the observable, so the period is
    the sum of the shortest repeating block of inter-maximum intervals.
    """
    x = np.asarray(x, dtype=float)
    scale = max(float(np.mean(np.abs(x))), 1e-300)
    if np.std(x) / scale < math.sqrt(rel_variance_tol):
        return None
    amp = float(np.max(x) - np.min(x))
    pk = peak_times(t, x, prominence=0.1 * amp)
    if pk.size < 2:
        return None
    d = np.diff(pk)
    k = _fundamental_lag(d, repeat_rtol) if d.size >= 2 else None
    if k is None:
        k = 1  # aperiodic: report the mean interval with its (large) spread
    starts = pk[::k]
    cycles = np.diff(starts)
    if cycles.size < min_cycles:
        return None
    P = float(np.mean(cycles))
    return PeriodEstimate(P, float((cycles.max() - cycles.min()) / P), int(cycles.size), observable, starts)


def wave_arrival_times(
    traj: Trajectory,
    m: int,
    period: float,
    start_cell: int,
    amplitude_frac: float = 0.1,
):
    """Relative arrival times of the auxin oscillation, walking from ``start_cell`` towards cell 0.

    The delay between neighbouring cells is the lag maximising the
    cross-correlation of their (uniformly sampled) auxin signals within
    half a period.  The walk stops where the oscillation amplitude falls
    below ``amplitude_frac`` of the largest amplitude, which delimits the
    peaked region.  Returns ``(cells, times)`` with ``times[0] = 0``.
    """
    A = traj.component(m, 0)
    dt = float(np.median(np.diff(traj.t)))
    amp = A.max(axis=0) - A.min(axis=0)
    thresh = amplitude_frac * amp.max()
    L = max(1, int(0.5 * period / dt))
    cells, times = [start_cell], [0.0]
    X = A - A.mean(axis=0)
    for i in range(start_cell - 1, -1, -1):
        if amp[i] < thresh:
            break
        # c[k] = sum_t x_{i+1}(t) x_i(t + k)
        c = correlate(X[:, i], X[:, i + 1], mode="full", method="fft")
        mid = X.shape[0] - 1
        window = c[mid - L : mid + L + 1]
        lag = (int(np.argmax(window)) - L) * dt
        cells.append(i)
        times.append(times[-1] + lag)
    return np.array(cells), np.array(times)


def find_periodic_state(
    model: ModelDefinition,
    tissue: TissueGraph,
    T: float,
    init,
    burn_in: float = 5000.0,
    record: float = 3000.0,
    sample_dt: float = 1.0,
    observable_cell: int | None = None,
    settings: IntegratorSettings | None = None,
    rel_variance_tol: float = 1e-8,
) -> PeriodicResult:
    """Integrate past the transient at ``T`` and measure the oscillation period.

    ``init`` is typically a steady state obtained slightly below the first
    Hopf point; the observable is the auxin level of ``observable_cell``
    (default: the cell holding the highest auxin peak of ``init``, i.e. the
    boundary peak).
    """
    m = model.m
    init = np.asarray(init, dtype=float)
    cell = int(np.argmax(init.reshape(-1, m)[:, 0])) if observable_cell is None else int(observable_cell)
    base = settings or IntegratorSettings()
    fun, jac = _model_funcs(model, tissue, T)
    s_burn = IntegratorSettings(**{**base.__dict__, "sample_dt": None, "stride": 10**9})
    burn = integrate_ode(fun, jac, init, (0.0, burn_in), s_burn, raise_on_underflow=True)
    y_b = burn.final
    s_rec = IntegratorSettings(**{**base.__dict__, "sample_dt": sample_dt, "stride": 1})
    rec = integrate_ode(fun, jac, y_b, (burn_in, burn_in + record), s_rec, raise_on_underflow=True)
    x = rec.component(m, 0)[:, cell]
    est = estimate_period(rec.t, x, observable=f"a[{cell}]", rel_variance_tol=rel_variance_tol)
    meta = {"burn_in": burn_in, "record": record, "cell": cell}
    if est is None:
        return PeriodicResult(False, None, None, T, "no-periodic-state", rec, meta)
    # one full cycle between the last two maxima
    t_a, t_b = est.peak_times[-2], est.peak_times[-1]
    lo = max(0, int(np.searchsorted(rec.t, t_a)) - 2)
    hi = min(len(rec.t), int(np.searchsorted(rec.t, t_b)) + 3)
    cycle = Trajectory(rec.t[lo:hi], rec.states[lo:hi], "ok")
    return PeriodicResult(True, est, cycle, T, "ok", rec, meta)
