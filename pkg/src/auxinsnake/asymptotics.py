"""Homogeneous states and first-order small-``T`` corrections.

For small active transport on a regular tissue the steady state is
``y_i = y* + T eta_i + O(T^2)``.  Without diffusion
``eta_i = xi_i [pi'(y*) - delta'(y*)]^{-1} psi(y*, y*)`` with the geometric
coefficient ``xi_i = 1 - sum_{j in N_i} 1/|N_j|``; with diffusion the
``eta_i`` solve ``[J(y*) + L (x) D] eta = (xi_i psi(y*, y*))_i``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import EvaluationError, SingularLinearizationError, ValidationError
from .model import ModelDefinition
from .tissue import TissueGraph

log = logging.getLogger(__name__)

__all__ = [
    "HomogeneousState",
    "GeometricCoefficients",
    "AsymptoticSolution",
    "IrregularTissueError",
    "homogeneous_state",
    "geometric_coefficients",
    "local_jacobian",
    "weighted_laplacian",
    "first_order_no_diffusion",
    "first_order_with_diffusion",
]


class IrregularTissueError(ValidationError):
    """The small-T theory needs identical cells (one volume, one contact ratio)."""


@dataclass(frozen=True)
class HomogeneousState:
    y_star: np.ndarray

    @property
    def a(self) -> float:
        return float(self.y_star[0])

    @property
    def p(self) -> float:
        return float(self.y_star[1]) if self.y_star.size > 1 else float("nan")

    def tile(self, n: int) -> np.ndarray:
        return np.tile(self.y_star, n)


@dataclass(frozen=True)
class GeometricCoefficients:
    xi: np.ndarray
    exact: tuple
    interior: np.ndarray
    boundary: np.ndarray


@dataclass
class AsymptoticSolution:
    base: HomogeneousState
    eta: np.ndarray  # (n, m)
    xi: np.ndarray
    T_ref: float | None = None
    diffusion: bool = False
    validity_note: str = "first-order in T; error O(T^2)"

    def evaluate(self, T: float | None = None) -> np.ndarray:
        T = self.T_ref if T is None else T
        if T is None:
            raise ValueError("no T given and no T_ref set")
        return (self.base.y_star[None, :] + T * self.eta).reshape(-1)

    @property
    def alpha(self) -> np.ndarray:
        """Auxin part of the first-order correction."""
        return self.eta[:, 0]


def homogeneous_state(model: ModelDefinition, rtol: float = 1e-12) -> HomogeneousState:
    """Spatially uniform balance of production and decay."""
    y = np.asarray(model.homogeneous(), dtype=float)
    Y = y[None, :]
    prod, dec = model.production(Y)[0], model.decay(Y)[0]
    if not np.all(np.abs(prod - dec) <= rtol * np.maximum(np.abs(prod), 1e-300) + 1e-300):
        raise EvaluationError(f"homogeneous state fails the balance check: pi={prod}, delta={dec}")
    return HomogeneousState(y)


def geometric_coefficients(tissue: TissueGraph) -> GeometricCoefficients:
    """``xi_i = 1 - sum_j 1/|N_j|`` over effective (ghost-including) degrees.

    A mirror ghost of cell ``i`` has the same neighbour count as ``i``.
    """
    d = tissue.effective_degree
    exact = []
    for i, nb in enumerate(tissue.neighbors):
        x = Fraction(1) - sum((Fraction(1, int(d[j])) for j in nb), Fraction(0))
        x -= Fraction(int(tissue.ghosts[i]), int(d[i]))
        exact.append(x)
    xi = np.array([float(x) for x in exact])
    interior = np.array([i for i, x in enumerate(exact) if x == 0], dtype=int)
    boundary = np.array([i for i, x in enumerate(exact) if x != 0], dtype=int)
    return GeometricCoefficients(xi, tuple(exact), interior, boundary)


def local_jacobian(model: ModelDefinition, y_star) -> np.ndarray:
    """``pi'(y*) - delta'(y*)`` as an ``m x m`` matrix."""
    Y = np.asarray(y_star, dtype=float)[None, :]
    return (model.d_production(Y) - model.d_decay(Y))[0]


def _psi_star(model, y_star, volume):
    Y = np.asarray(y_star, dtype=float)[None, :]
    out = np.zeros(model.m)
    out[list(model.transported)] = model.psi(Y, Y)[0] / volume
    return out


def _require_regular(tissue):
    if not tissue.is_regular:
        raise IrregularTissueError(
            "first-order corrections are only available on regular tissues "
            "(identical volumes and contact ratios)"
        )


def first_order_no_diffusion(model: ModelDefinition, tissue: TissueGraph, T_ref: float | None = None) -> AsymptoticSolution:
    _require_regular(tissue)
    base = homogeneous_state(model)
    Jl = local_jacobian(model, base.y_star)
    if abs(np.linalg.det(Jl)) < 1e-14 * max(1.0, np.abs(Jl).max()) ** model.m:
        raise SingularLinearizationError("pi'(y*) - delta'(y*) is singular")
    direction = np.linalg.solve(Jl, _psi_star(model, base.y_star, tissue.volumes[0]))
    geo = geometric_coefficients(tissue)
    eta = geo.xi[:, None] * direction[None, :]
    return AsymptoticSolution(base, eta, geo.xi, T_ref, diffusion=False)


def weighted_laplacian(tissue: TissueGraph) -> sp.csr_matrix:
    """``L_ij = l_ij / V_i``, ``L_ii = -sum_j l_ij / V_i`` (ghosts carry no flux)."""
    src, dst, l = tissue.edges
    n = tissue.n
    V = tissue.volumes
    off = sp.coo_matrix((l / V[src], (src, dst)), shape=(n, n))
    diag = np.bincount(src, weights=l, minlength=n) / V
    return (off - sp.diags(diag)).tocsr()


def first_order_with_diffusion(
    model: ModelDefinition,
    tissue: TissueGraph,
    T_ref: float | None = None,
    cond_warn: float = 1e12,
) -> AsymptoticSolution:
    _require_regular(tissue)
    base = homogeneous_state(model)
    n, m = tissue.n, model.m
    Jl = local_jacobian(model, base.y_star)
    A = sp.kron(sp.identity(n), sp.csr_matrix(Jl)) + sp.kron(weighted_laplacian(tissue), sp.diags(model.diffusion))
    A = sp.csc_matrix(A)
    geo = geometric_coefficients(tissue)
    rhs = (geo.xi[:, None] * _psi_star(model, base.y_star, tissue.volumes[0])[None, :]).reshape(-1)
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SingularLinearizationError(f"J + L (x) D is singular: {exc}") from None
    eta = lu.solve(rhs)
    if not np.all(np.isfinite(eta)):
        raise SingularLinearizationError("J + L (x) D solve produced non-finite values")
    inv = spla.LinearOperator(A.shape, matvec=lu.solve, rmatvec=lambda b: lu.solve(b, trans="T"), dtype=float)
    cond = spla.onenormest(A) * spla.onenormest(inv)
    if cond > cond_warn:
        warnings.warn(f"J + L (x) D is ill-conditioned (cond ~ {cond:.2e})", RuntimeWarning, stacklevel=2)
    return AsymptoticSolution(base, eta.reshape(n, m), geo.xi, T_ref, diffusion=bool(np.any(model.diffusion)))
