import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from auxinsnake.asymptotics import (
    IrregularTissueError,
    first_order_no_diffusion,
    first_order_with_diffusion,
    geometric_coefficients,
    homogeneous_state,
    local_jacobian,
    weighted_laplacian,
)
from auxinsnake.continuation import newton_solve
from auxinsnake.model import ModelParams, assemble_residual, make_model
from auxinsnake.tissue import TissueGraph, build_hex_grid, build_line, build_ring, build_voronoi_disc

from oracles import brute_xi


def test_homogeneous_state_closed_form(smith):
    hs = homogeneous_state(smith)
    a = (-1 + math.sqrt(35)) / 2
    assert hs.a == pytest.approx(a, rel=1e-14)
    assert hs.a == pytest.approx(2.45803, abs=1e-5)
    p = (-1 + math.sqrt(1 + 4 * a / 0.1)) / 2
    assert hs.p == pytest.approx(p, rel=1e-14)
    assert hs.p == pytest.approx(4.48301, abs=1e-5)


@pytest.mark.parametrize("kappa", [1e-8, 0.3, 1.0, 7.0])
def test_homogeneous_state_inverse_construction(kappa):
    a_target = 2.0
    m = make_model("smith", ModelParams(kappa_IAA=kappa, rho_IAA=0.1 * a_target * (1 + kappa * a_target)))
    assert homogeneous_state(m).a == pytest.approx(a_target, rel=1e-12)


def test_xi_line():
    geo = geometric_coefficients(build_line(150))
    assert geo.exact[:148] == (0,) * 148
    assert geo.exact[148:] == (Fraction(-1, 2), Fraction(1, 2))
    assert geo.boundary.tolist() == [148, 149]


def test_xi_ring_is_zero():
    assert np.all(geometric_coefficients(build_ring(9)).xi == 0)


@pytest.mark.parametrize("size", range(5, 15))
def test_xi_hex_matches_brute_force(size):
    g = build_hex_grid(size, size)
    assert list(geometric_coefficients(g).exact) == brute_xi([list(nb) for nb in g.neighbors])


def test_xi_hex_50_extremes_near_top_left_and_bottom_right():
    g = build_hex_grid(50, 50)
    geo = geometric_coefficients(g)
    assert list(geo.exact) == brute_xi([list(nb) for nb in g.neighbors])
    cells = np.flatnonzero(geo.xi == geo.xi.min())
    rc = [divmod(int(i), 50) for i in cells]
    assert rc == [(1, 1), (48, 48)]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_xi_sums_to_zero_on_random_graphs(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    edges = {(i, int(rng.integers(0, i))) for i in range(1, n)}
    for _ in range(int(rng.integers(0, 2 * n))):
        i, j = rng.integers(0, n, 2)
        if i != j:
            edges.add((max(i, j), min(i, j)))
    nb = [[] for _ in range(n)]
    for i, j in edges:
        nb[i].append(j)
        nb[j].append(i)
    ghosts = rng.integers(0, 2, n)
    g = TissueGraph(neighbors=nb, contact=[[1.0] * len(x) for x in nb], volumes=np.ones(n), labels=["c"] * n, ghosts=ghosts, ghost_contact=np.ones(n))
    geo = geometric_coefficients(g)
    assert sum(geo.exact) == 0
    assert list(geo.exact) == brute_xi(nb, ghosts)


def _smith_closed_form(q, a, p, V, T):
    """Leading-order boundary corrections of the two-component Smith model on the line."""
    A = q.rho_IAA * q.kappa_IAA / (1 + q.kappa_IAA * a) ** 2 + q.mu_IAA
    P = (q.rho_PIN0 + q.rho_PIN * a) * q.kappa_PIN / (1 + q.kappa_PIN * p) ** 2 + q.mu_PIN
    s = a**2 / (1 + q.kappa_T * a**2)
    da = T * p / (2 * V) / A * s
    dp = T * p / (2 * V) * (q.rho_PIN / (1 + q.kappa_PIN * p)) * s / (A * P)
    return da, dp


@pytest.mark.parametrize("V", [1.0, 2.5])
def test_no_diffusion_matches_closed_form_smith(V):
    m = make_model("smith", ModelParams(rho_IAA=0.85, D=0.0))
    g = build_line(30, V=V)
    hs = homogeneous_state(m)
    T = 1e-3
    sol = first_order_no_diffusion(m, g)
    y = sol.evaluate(T).reshape(-1, 2)
    da, dp = _smith_closed_form(m.params, hs.a, hs.p, V, T)
    assert y[-2, 0] == pytest.approx(hs.a + da, rel=1e-13)
    assert y[-1, 0] == pytest.approx(hs.a - da, rel=1e-13)
    assert y[-2, 1] == pytest.approx(hs.p + dp, rel=1e-13)
    assert y[-1, 1] == pytest.approx(hs.p - dp, rel=1e-13)
    assert np.all(sol.eta[:-2] == 0)


def test_no_diffusion_chitwood_factor(chitwood):
    m = chitwood.with_params(D=0.0)
    g = build_line(10)
    hs = homogeneous_state(m)
    q = m.params
    A = q.rho_IAA * q.kappa_IAA / (1 + q.kappa_IAA * hs.a) ** 2 + q.mu_IAA
    factor = (math.exp(q.c2 * hs.a) - 1) / math.exp(q.c2 * hs.a)
    eta = first_order_no_diffusion(m, g).alpha
    assert eta[-2] == pytest.approx(hs.p / 2 * factor / A, rel=1e-13)


def test_sign_structure_smith_line(smith):
    alpha = first_order_no_diffusion(smith.with_params(D=0.0), build_line(20)).alpha
    assert alpha[-2] > 0 > alpha[-1]
    Jl = local_jacobian(smith, homogeneous_state(smith).y_star)
    assert np.all(np.linalg.eigvals(Jl).real < 0)


def test_with_diffusion_reduces_at_D0(smith):
    m = smith.with_params(D=0.0)
    g = build_hex_grid(6, 6)
    a = first_order_no_diffusion(m, g)
    b = first_order_with_diffusion(m, g)
    assert np.allclose(a.eta, b.eta, rtol=1e-12, atol=1e-15)


def test_with_diffusion_three_cells_by_hand():
    q = ModelParams(rho_IAA=0.85, D=0.7, p_fixed=4.0)
    m = make_model("frozen-pin-smith", q)
    g = build_line(3)  # Neumann left, free right: xi = (0, -1/2, 1/2)
    a = homogeneous_state(m).a
    j = -q.rho_IAA * q.kappa_IAA / (1 + q.kappa_IAA * a) ** 2 - q.mu_IAA
    psi = q.p_fixed * a**2 / (1 + q.kappa_T * a**2)
    D = q.D
    M = np.array([[j - D, D, 0.0], [D, j - 2 * D, D], [0.0, D, j - D]])
    eta = np.linalg.solve(M, np.array([0.0, -0.5, 0.5]) * psi)
    assert np.allclose(first_order_with_diffusion(m, g).alpha, eta, rtol=1e-13)


def test_weighted_laplacian_line_corner_entries():
    L = weighted_laplacian(build_line(5)).toarray()
    assert L[0, 0] == -1 and L[-1, -1] == -1
    assert np.all(np.diag(L)[1:-1] == -2)
    assert np.allclose(L.sum(axis=1), 0)


@pytest.mark.parametrize("diffusion", [False, True])
def test_first_order_residual_is_second_order(smith, diffusion):
    g = build_line(40)
    m = smith if diffusion else smith.with_params(D=0.0)
    sol = first_order_with_diffusion(m, g) if diffusion else first_order_no_diffusion(m, g)
    res = [np.linalg.norm(assemble_residual(m, g, sol.evaluate(T), T=T)) for T in (1e-3, 1e-4, 1e-5)]
    orders = np.log10(np.array(res[:-1]) / np.array(res[1:]))
    assert np.all(orders > 1.9)


def test_fig2_profile_shape(smith, line150):
    T = 3e-5
    alpha = first_order_with_diffusion(smith, line150, T_ref=T).alpha
    assert alpha[-1] < 0  # dip at the free end
    assert int(np.argmax(alpha)) in range(140, 149)  # peak just inside the boundary
    # the peak spreads over several cells with diffusion
    assert np.sum(alpha > 0.1 * alpha.max()) >= 3
    sharp = first_order_no_diffusion(smith.with_params(D=0.0), line150).alpha
    assert np.sum(sharp > 0) == 1


def test_hex_first_order_peak_at_most_negative_xi(smith):
    m = smith.with_params(rho_IAA=1.5)
    g = build_hex_grid(14, 14)
    sol = first_order_no_diffusion(m, g)
    assert set(np.flatnonzero(sol.alpha == sol.alpha.max())) == set(np.flatnonzero(sol.xi == sol.xi.min()))


def test_irregular_tissue_is_refused(smith):
    with pytest.raises(IrregularTissueError):
        first_order_no_diffusion(smith, build_voronoi_disc(20, seed=0))


@pytest.mark.parametrize("T", [0.05, 0.1, 0.2])
def test_asymptotic_relative_error_n150(smith, line150, T):
    sol = first_order_with_diffusion(smith, line150)
    approx = sol.evaluate(T)
    y = newton_solve(smith, line150, approx, T=T).state
    a, a_hat = y[::2], approx[::2]
    assert np.linalg.norm(a - a_hat) / np.linalg.norm(a) < 0.004


def test_evaluate_needs_T(smith):
    sol = first_order_no_diffusion(smith.with_params(D=0.0), build_line(5))
    with pytest.raises(ValueError):
        sol.evaluate()
