import math
from types import SimpleNamespace

import numpy as np
import pytest
import scipy.sparse as sp

from auxinsnake.asymptotics import first_order_with_diffusion, homogeneous_state
from auxinsnake.continuation import (
    ContinuationSettings,
    FoldEvent,
    NewtonSettings,
    PreconditionError,
    SteadyProblem,
    continue_branch,
    detect_folds,
    newton,
    newton_solve,
    snaking_width,
    sweep,
)
from auxinsnake.errors import NoConvergenceError
from auxinsnake.model import ModelParams, assemble_residual, make_model
from auxinsnake.tissue import build_line, build_ring


class QuadraticFold:
    """``y^2 + T - T_c = 0``: a single fold at ``T = T_c``."""

    n_cells = 1

    def __init__(self, Tc):
        self.Tc = Tc
        self.model = SimpleNamespace(m=1, name="quadratic")

    def residual(self, y, T):
        return np.array([y[0] ** 2 + T - self.Tc])

    def jacobian(self, y, T):
        return sp.csr_matrix([[2.0 * y[0]]])

    def dparam(self, y, T):
        return np.array([1.0])

    def measure(self, y):
        return float(y[0])


@pytest.mark.parametrize("kind,params", [
    ("smith", ModelParams(rho_IAA=0.85)),
    ("chitwood", ModelParams(rho_IAA=1.5, kappa_T=None, c2=0.405)),
])
@pytest.mark.parametrize("tissue", ["line", "hex", "voronoi"])
def test_newton_recovers_homogeneous_state(kind, params, tissue, small_tissues, rng):
    m = make_model(kind, params)
    g = small_tissues[tissue]
    y_star = homogeneous_state(m).tile(g.n)
    res = newton_solve(m, g, y_star + 1e-3 * rng.standard_normal(y_star.size), T=0.0)
    assert np.max(np.abs(res.state - y_star) / y_star) < 1e-10


def test_newton_from_asymptotic_guess(smith, line150):
    guess = first_order_with_diffusion(smith, line150).evaluate(0.1)
    res = newton_solve(smith, line150, guess, T=0.1)
    assert res.iterations <= 5
    assert res.residual_norm < 1e-10
    # boundary peak
    a = res.state[::2]
    assert int(np.argmax(a)) >= 140


def test_newton_from_zero(smith):
    g = build_line(10)
    res = newton_solve(smith, g, np.zeros(20), T=0.0)
    assert res.residual_norm < 1e-10
    assert np.max(np.abs(assemble_residual(smith, g, res.state, T=0.0))) < 1e-10


def test_newton_no_convergence_carries_best():
    prob = QuadraticFold(1.0)
    with pytest.raises(NoConvergenceError) as info:
        newton(prob, np.array([0.5]), 2.0, NewtonSettings(max_iters=5))  # no real root beyond the fold
    assert info.value.best is not None and info.value.residual_norm > 0


def test_newton_rejects_nonfinite(smith):
    with pytest.raises(ValueError):
        newton_solve(smith, build_line(4), np.full(8, np.nan))


def test_newton_settings_validated():
    with pytest.raises(ValueError):
        NewtonSettings(max_iters=0)


def test_quadratic_fold_located():
    Tc = 0.7
    prob = QuadraticFold(Tc)
    br = continue_branch(prob, None, np.array([-math.sqrt(Tc)]), (0.0, 1.0), ContinuationSettings(stability=False, ds_max=0.05))
    folds = detect_folds(br, prob)
    assert len(folds) == 1 and folds[0].kind == "right"
    assert folds[0].param == pytest.approx(Tc, abs=1e-4)
    assert br.reason == "returned-below-start"


def test_monotone_branch_has_no_folds(smith):
    g = build_line(10)
    y0 = homogeneous_state(smith).tile(g.n)
    br = continue_branch(smith, g, y0, (0.0, 0.5), ContinuationSettings(stability=False))
    assert br.reason == "parameter-bound"
    assert br.points[-1].param == 0.5  # lands on the bound
    assert detect_folds(br) == []


def test_parameter_independent_branch_is_flat():
    m = make_model("frozen-pin-smith", ModelParams(p_fixed=0.0, D=0.0))
    g = build_line(8)
    y0 = homogeneous_state(m).tile(g.n)
    br = continue_branch(m, g, y0, (0.0, 3.0), ContinuationSettings(stability=False))
    assert np.allclose(br.measures, br.measures[0], rtol=1e-12)


def test_ring_branch_stays_homogeneous(smith):
    g = build_ring(20)
    hs = homogeneous_state(smith)
    br = continue_branch(smith, g, hs.tile(g.n), (0.0, 10.0), ContinuationSettings(stability=False, ds_max=0.5))
    assert br.reason == "parameter-bound"
    assert np.allclose(br.measures, math.sqrt(g.n) * hs.a, rtol=1e-12)


def test_branch_invariants(smith):
    g = build_line(30)
    s = ContinuationSettings(stability=False, ds_max=0.05)
    prob = SteadyProblem(smith, g, "T")
    br = continue_branch(prob, None, homogeneous_state(smith).tile(g.n), (0.0, 3.0), s)
    w = 1.0 / g.n
    for k, p in enumerate(br.points):
        assert np.max(np.abs(prob.residual(p.state, p.param))) < s.tol_residual
        assert p.measure == pytest.approx(np.linalg.norm(p.state[::2]), rel=1e-12)
        t = p.tangent
        assert w * t[:-1] @ t[:-1] + t[-1] ** 2 == pytest.approx(1.0, rel=1e-12)
        if k:
            q = br.points[k - 1]
            dz = np.concatenate([p.state - q.state, [p.param - q.param]])
            # arclength constraint, in the weighted inner product
            assert w * q.tangent[:-1] @ dz[:-1] + q.tangent[-1] * dz[-1] == pytest.approx(p.ds, abs=1e-8)
            assert w * q.tangent[:-1] @ t[:-1] + q.tangent[-1] * t[-1] > 0
            assert math.sqrt(w * dz[:-1] @ dz[:-1] + dz[-1] ** 2) <= s.continuity * s.ds_max


def test_start_must_be_steady():
    # beyond the fold there is no root to correct onto
    with pytest.raises(PreconditionError):
        continue_branch(QuadraticFold(1.0), None, np.array([0.5]), (2.0, 3.0), ContinuationSettings(stability=False))


def test_settings_validated():
    with pytest.raises(ValueError):
        ContinuationSettings(ds0=1.0, ds_max=0.1)


def test_fold_limit_stops_branch():
    prob = QuadraticFold(0.3)
    s = ContinuationSettings(stability=False, max_folds=1)
    br = continue_branch(prob, None, np.array([-math.sqrt(0.3)]), (0.0, 1.0), s)
    assert br.reason == "fold-limit"


def test_snaking_width_skips_first_turning_point():
    mk = lambda p, k: FoldEvent(p, 0, k, None, 0.0)
    folds = [mk(2.16, "right"), mk(1.96, "left"), mk(2.50, "right"), mk(1.97, "left"), mk(2.51, "right")]
    assert snaking_width(folds) == pytest.approx(0.54)
    assert snaking_width(folds, pairs=2) == pytest.approx(0.54)
    assert snaking_width(folds[:2]) == 0.0
    assert snaking_width([]) == 0.0


def test_sweep_single_value_equals_continuation(smith):
    g = build_line(12)
    s = ContinuationSettings(stability=False)
    [b1] = sweep(smith, g, "rho_IAA", [0.9], (0.0, 1.0), s)
    m = smith.with_params(rho_IAA=0.9)
    b2 = continue_branch(m, g, homogeneous_state(m).tile(g.n), (0.0, 1.0), s)
    assert np.array_equal(b1.params, b2.params)
    assert np.array_equal(b1.measures, b2.measures)


def test_sweep_deterministic_and_isolates_failures(smith):
    g = build_line(12)
    s = ContinuationSettings(stability=False)
    vals = [0.5, 0.9, 1.3]
    a = sweep(smith, g, "rho_IAA", vals, (0.0, 1.0), s, workers=3)
    b = sweep(smith, g, "rho_IAA", vals, (0.0, 1.0), s, workers=1)
    for x, y in zip(a, b):
        assert np.array_equal(x.measures, y.measures)

    def bad_start(mdl, tissue):
        if mdl.params.rho_IAA > 1:
            return np.full(tissue.n * 2, -5.0)
        return homogeneous_state(mdl).tile(tissue.n)

    out = sweep(smith, g, "rho_IAA", vals, (0.0, 1.0), s, start_factory=bad_start)
    assert isinstance(out[2], PreconditionError)
    assert len(out[0]) > 1


def test_sweep_rejects_nonfinite(smith):
    with pytest.raises(ValueError):
        sweep(smith, build_line(5), "rho_IAA", [float("nan")], (0.0, 1.0))


def test_non_T_parameter_continuation(smith):
    g = build_line(10)
    m = smith.with_params(T=0.0)
    prob = SteadyProblem(m, g, "rho_IAA")
    m0 = m.with_params(rho_IAA=0.5)
    br = continue_branch(prob, None, homogeneous_state(m0).tile(g.n), (0.5, 1.0), ContinuationSettings(stability=False))
    # at T = 0 the branch is the homogeneous state for every rho
    for p in br.points[::5]:
        a = homogeneous_state(m.with_params(rho_IAA=p.param)).a
        assert np.allclose(p.state[::2], a, rtol=1e-9)


def test_stability_recorded_on_points(smith):
    g = build_line(20)
    br = continue_branch(smith, g, homogeneous_state(smith).tile(g.n), (0.0, 0.5), ContinuationSettings())
    assert all(p.stability == "stable" for p in br.points)
