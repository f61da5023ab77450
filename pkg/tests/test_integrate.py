import math

import numpy as np
import pytest
import scipy.sparse as sp

from auxinsnake.asymptotics import homogeneous_state
from auxinsnake.continuation import newton_solve
from auxinsnake.errors import StepSizeUnderflowError, ValidationError
from auxinsnake.integrate import (
    IntegratorSettings,
    Trajectory,
    estimate_period,
    integrate,
    integrate_ode,
    iter_integrate,
    peak_times,
    wave_arrival_times,
)
from auxinsnake.tissue import build_line

from oracles import rk4


def _linear(lam):
    A = sp.csr_matrix(np.atleast_2d(lam))
    return (lambda y: A @ y), (lambda y: A)


def test_steady_state_is_preserved(smith):
    g = build_line(20)
    y = newton_solve(smith, g, homogeneous_state(smith).tile(g.n), T=0.5).state
    tr = integrate(smith, g, y, (0.0, 1000.0), T=0.5)
    assert tr.status == "ok"
    assert np.max(np.abs(tr.final - y) / y) < 1e-6


def test_decoupled_cells_match_rk4(smith, rng):
    m = smith.with_params(D=0.0)
    g = build_line(3)
    y0 = homogeneous_state(m).tile(g.n) * rng.uniform(0.3, 1.7, 2 * g.n)
    tr = integrate(m, g, y0, (0.0, 60.0), IntegratorSettings(rtol=1e-10, atol=1e-12), T=0.0)

    def local(y):
        Y = y.reshape(-1, 2)
        return (m.production(Y) - m.decay(Y)).ravel()

    ref = rk4(local, y0, 60.0, 6000)
    assert np.max(np.abs(tr.final - ref) / np.abs(ref)) < 1e-6


def test_fixed_step_second_order():
    fun, jac = _linear([[-1.0, 2.0], [-2.0, -1.0]])
    y0 = np.array([1.0, 0.0])
    exact = math.exp(-2.0) * np.array([math.cos(4.0), -math.sin(4.0)])
    errs = []
    for h in (0.1, 0.05, 0.025):
        tr = integrate_ode(fun, jac, y0, (0.0, 2.0), IntegratorSettings(fixed_step=h))
        assert tr.t[-1] == pytest.approx(2.0)
        errs.append(np.linalg.norm(tr.final - exact))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 1.9)


def test_stiff_decay_is_damped():
    fun, jac = _linear([[-1e6]])
    tr = integrate_ode(fun, jac, np.array([1.0]), (0.0, 1.0), IntegratorSettings(fixed_step=0.1))
    assert abs(tr.final[0]) < 1e-6


def test_adaptive_steps_honour_tolerance():
    fun, jac = _linear([[-0.5]])
    errs = []
    for rtol in (1e-4, 1e-6, 1e-8):
        tr = integrate_ode(fun, jac, np.array([1.0]), (0.0, 10.0), IntegratorSettings(rtol=rtol, atol=1e-14))
        err = abs(tr.final[0] - math.exp(-5.0)) / math.exp(-5.0)
        # local error per step is controlled, so the global error is at most steps * rtol
        assert err < tr.n_steps * rtol
        errs.append(err)
    assert errs[0] > errs[1] > errs[2]


def test_sample_grid_is_uniform():
    fun, jac = _linear([[-0.5]])
    tr = integrate_ode(fun, jac, np.array([1.0]), (0.0, 10.0), IntegratorSettings(rtol=1e-10, atol=1e-14, sample_dt=0.5))
    assert np.allclose(tr.t, np.arange(0.0, 10.01, 0.5))
    assert np.allclose(tr.states[:, 0], np.exp(-0.5 * tr.t), rtol=1e-6)


def test_negative_excursion_is_flagged():
    def fun(y):
        return -y - 1.0

    tr = integrate_ode(fun, lambda y: sp.csr_matrix([[-1.0]]), np.array([0.5]), (0.0, 3.0))
    assert not tr.positive
    t, lo, i = tr.positivity_violations[0]
    assert i == 0 and lo < 0 and t == pytest.approx(math.log(1.5), abs=0.2)


def test_positive_run_has_no_flags(smith):
    g = build_line(6)
    tr = integrate(smith, g, homogeneous_state(smith).tile(g.n), (0.0, 50.0), T=1.0)
    assert tr.positive


def test_blow_up_reports_underflow():
    fun = lambda y: y**2
    jac = lambda y: sp.csr_matrix([[2 * y[0]]])
    tr = integrate_ode(fun, jac, np.array([1.0]), (0.0, 2.0), raise_on_underflow=False)
    assert tr.status == "step-size-underflow"
    assert tr.t[-1] < 1.0 and np.all(np.isfinite(tr.states))
    with pytest.raises(StepSizeUnderflowError) as info:
        integrate_ode(fun, jac, np.array([1.0]), (0.0, 2.0))
    assert info.value.t < 1.0


def test_invalid_inputs(smith):
    g = build_line(4)
    with pytest.raises(ValidationError):
        integrate(smith, g, np.ones(7), (0.0, 1.0))
    with pytest.raises(ValidationError):
        integrate(smith, g, np.ones(8), (1.0, 0.0))
    with pytest.raises(ValidationError):
        IntegratorSettings(rtol=0.0)


def test_streaming_matches_batch(smith):
    g = build_line(5)
    y0 = homogeneous_state(smith).tile(g.n) * 1.1
    tr = integrate(smith, g, y0, (0.0, 20.0), T=2.0)
    last = None
    for smp in iter_integrate(smith, g, y0, (0.0, 20.0), T=2.0):
        last = smp
    assert last.t == tr.t[-1]
    assert np.array_equal(last.state, tr.final)


# -- period detection -------------------------------------------------------

def test_period_of_sine():
    t = np.arange(0.0, 100.0, 0.05)
    est = estimate_period(t, 3.0 + np.sin(2 * np.pi * t / 7.3))
    assert est.period == pytest.approx(7.3, rel=1e-4)
    assert est.spread < 1e-3 and est.n_cycles >= 10


def test_period_with_two_maxima_per_cycle():
    t = np.arange(0.0, 200.0, 0.02)
    x = np.sin(t) + 0.8 * np.sin(2 * t)
    est = estimate_period(t, x)
    assert est.period == pytest.approx(2 * np.pi, rel=1e-3)


def test_no_oscillation_returns_none():
    t = np.linspace(0.0, 50.0, 1000)
    assert estimate_period(t, np.full_like(t, 2.0)) is None
    assert estimate_period(t, 2.0 + np.exp(-t)) is None


def test_peak_times_refined_beyond_grid():
    t = np.arange(0.0, 10.0, 0.3)
    pk = peak_times(t, -((t - 4.0) ** 2))
    assert pk == pytest.approx([4.0], abs=1e-12)


def test_wave_arrival_times_of_travelling_wave():
    w, c, n = 0.5, 0.3, 6
    t = np.arange(0.0, 200.0, 0.01)
    A = np.stack([2 + np.sin(w * t + c * i) for i in range(n)], axis=1)
    cells, times = wave_arrival_times(Trajectory(t, A), 1, 2 * np.pi / w, n - 1)
    assert cells.tolist() == list(range(n - 1, -1, -1))
    # correlating finite records biases the lag by a small fraction of the period
    assert np.allclose(np.diff(times), c / w, atol=0.005 * 2 * np.pi / w)


def test_wave_walk_stops_where_oscillation_fades():
    t = np.arange(0.0, 100.0, 0.05)
    amp = np.array([0.01, 0.02, 1.0, 1.0])
    A = 2 + amp * np.sin(t)[:, None]
    cells, _ = wave_arrival_times(Trajectory(t, A), 1, 2 * np.pi, 3)
    assert cells.tolist() == [3, 2]
