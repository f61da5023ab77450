"""Concentration-based auxin transport models and their assembly on a tissue.

A model supplies per-cell production and decay, a diagonal diffusion
matrix and active transport in factored form.  For a transported component
the flux from cell ``i`` to a neighbour ``j`` is::

    F_ij = psi(y_i, y_j) * l_ij * phi(y_j) / S_i,   S_i = sum_k l_ik phi(y_k)

and the residual of cell ``i`` is::

    pi(y_i) - delta(y_i) + D/V_i sum_j l_ij (y_j - y_i) + T/V_i sum_j (F_ji - F_ij)

State vectors are flat and cell-major: ``(a_0, p_0, a_1, p_1, ...)``.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, EvaluationError, ShapeError
from .tissue import TissueGraph

__all__ = [
    "ModelParams",
    "ModelDefinition",
    "SmithModel",
    "ChitwoodModel",
    "FrozenPinSmithModel",
    "smith_model",
    "chitwood_model",
    "frozen_pin_model",
    "make_model",
    "MODEL_IDS",
    "assemble_residual",
    "assemble_jacobian",
    "assemble_param_derivative",
    "auxin",
    "auxin_norm",
    "load_params",
    "parse_params",
]


@dataclass(frozen=True)
class ModelParams:
    """Control parameters (units: uM, um, h). Defaults are the Smith values."""

    rho_IAA: float = 0.85
    kappa_IAA: float = 1.0
    mu_IAA: float = 0.1
    rho_PIN0: float = 0.0
    rho_PIN: float = 1.0
    mu_PIN: float = 0.1
    kappa_PIN: float = 1.0
    c1: float = 1.099
    kappa_T: float | None = 1.0
    c2: float | None = None
    D: float = 1.0
    T: float = 0.0
    p_fixed: float | None = None

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigError(f"parameter {f.name} must be a finite number, got {v!r}")
            if v < 0:
                raise ConfigError(f"parameter {f.name} must be nonnegative, got {v}")

    def replace(self, **changes) -> "ModelParams":
        unknown = set(changes) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"unknown parameter(s): {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}

    def to_config_text(self) -> str:
        """Every field, with unset ones written as ``none`` so defaults cannot creep back in."""
        items = dataclasses.asdict(self).items()
        return "\n".join(f"{k} = {'none' if v is None else repr(v)}" for k, v in items) + "\n"


PARAM_KEYS = tuple(f.name for f in dataclasses.fields(ModelParams))


def parse_params(text: str, base: ModelParams | None = None) -> ModelParams:
    """Parse ``key = value`` lines; an optional ``[params]`` header is allowed."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    body = text if text.lstrip().startswith("[") else "[params]\n" + text
    try:
        cp.read_string(body)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse parameter file: {exc}") from None
    if not cp.has_section("params"):
        raise ConfigError("parameter file has no [params] section")
    values = {}
    for key, raw in cp.items("params"):
        if key not in PARAM_KEYS:
            raise ConfigError(f"unknown parameter key '{key}'")
        try:
            values[key] = None if raw.strip().lower() == "none" else float(raw)
        except ValueError:
            raise ConfigError(f"parameter '{key}': not a number ({raw!r})") from None
    return (base or ModelParams()).replace(**values)


def load_params(path: str | Path, base: ModelParams | None = None) -> ModelParams:
    return parse_params(Path(path).read_text(encoding="utf-8"), base)


class ModelDefinition:
    """Generic model: subclasses provide the local kinetics and transport factors.

    Array conventions: ``Y`` has shape ``(n, m)``.  ``psi`` takes the states
    at the two ends of each ordered edge and returns ``(E, k)`` values for
    the ``k`` transported components; ``phi`` returns ``(n, k)``.  All
    derivative methods append a trailing axis of length ``m``.  ``psi``
    excludes the ``1/V_i`` factor, which the assembly applies.
    """

    name = "generic"
    m = 1
    component_names: tuple[str, ...] = ("a",)
    transported: tuple[int, ...] = (0,)

    def __init__(self, params: ModelParams):
        self.params = params

    def with_params(self, **changes) -> "ModelDefinition":
        return type(self)(self.params.replace(**changes))

    @property
    def diffusion(self) -> np.ndarray:
        d = np.zeros(self.m)
        d[0] = self.params.D
        return d

    def production(self, Y):
        raise NotImplementedError

    def d_production(self, Y):
        raise NotImplementedError

    def decay(self, Y):
        raise NotImplementedError

    def d_decay(self, Y):
        raise NotImplementedError

    def psi(self, Yi, Yj):
        raise NotImplementedError

    def d_psi(self, Yi, Yj):
        """Return ``(dpsi/dy_i, dpsi/dy_j)``, each ``(E, k, m)``."""
        raise NotImplementedError

    def phi(self, Y):
        raise NotImplementedError

    def d_phi(self, Y):
        raise NotImplementedError

    def homogeneous(self) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.params!r})"


class _AuxinPinModel(ModelDefinition):
    m = 2
    component_names = ("a", "p")
    transported = (0,)

    def production(self, Y):
        q = self.params
        a, p = Y[:, 0], Y[:, 1]
        return np.column_stack([
            q.rho_IAA / (1.0 + q.kappa_IAA * a),
            (q.rho_PIN0 + q.rho_PIN * a) / (1.0 + q.kappa_PIN * p),
        ])

    def d_production(self, Y):
        q = self.params
        a, p = Y[:, 0], Y[:, 1]
        out = np.zeros((Y.shape[0], 2, 2))
        out[:, 0, 0] = -q.rho_IAA * q.kappa_IAA / (1.0 + q.kappa_IAA * a) ** 2
        out[:, 1, 0] = q.rho_PIN / (1.0 + q.kappa_PIN * p)
        out[:, 1, 1] = -(q.rho_PIN0 + q.rho_PIN * a) * q.kappa_PIN / (1.0 + q.kappa_PIN * p) ** 2
        return out

    def decay(self, Y):
        return Y * np.array([self.params.mu_IAA, self.params.mu_PIN])

    def d_decay(self, Y):
        out = np.zeros((Y.shape[0], 2, 2))
        out[:, 0, 0] = self.params.mu_IAA
        out[:, 1, 1] = self.params.mu_PIN
        return out

    def phi(self, Y):
        return np.exp(self.params.c1 * Y[:, :1])

    def d_phi(self, Y):
        out = np.zeros((Y.shape[0], 1, 2))
        out[:, 0, 0] = self.params.c1 * np.exp(self.params.c1 * Y[:, 0])
        return out

    def homogeneous(self):
        q = self.params
        a = _positive_root(q.kappa_IAA, q.rho_IAA / q.mu_IAA)
        p = _positive_root(q.kappa_PIN, (q.rho_PIN0 + q.rho_PIN * a) / q.mu_PIN)
        return np.array([a, p])


def _positive_root(kappa, ratio):
    # positive solution of x (1 + kappa x) = ratio
    disc = 1.0 + 4.0 * kappa * ratio
    if not disc >= 0:
        raise EvaluationError(f"negative discriminant {disc} in homogeneous state")
    if kappa == 0:
        return ratio
    # rationalised form avoids cancellation for small kappa*ratio
    return 2.0 * ratio / (1.0 + math.sqrt(disc))


class SmithModel(_AuxinPinModel):
    """Smith et al. transport: ``psi = p_i a_i^2 / (1 + kappa_T a_j^2)``."""

    name = "smith"

    def __init__(self, params):
        if params.kappa_T is None:
            raise ConfigError("Smith model requires kappa_T")
        super().__init__(params)

    def psi(self, Yi, Yj):
        kT = self.params.kappa_T
        return (Yi[:, 1] * Yi[:, 0] ** 2 / (1.0 + kT * Yj[:, 0] ** 2))[:, None]

    def d_psi(self, Yi, Yj):
        kT = self.params.kappa_T
        ai, pi_, aj = Yi[:, 0], Yi[:, 1], Yj[:, 0]
        den = 1.0 + kT * aj**2
        di = np.zeros((Yi.shape[0], 1, 2))
        dj = np.zeros((Yi.shape[0], 1, 2))
        di[:, 0, 0] = 2.0 * pi_ * ai / den
        di[:, 0, 1] = ai**2 / den
        dj[:, 0, 0] = -pi_ * ai**2 * 2.0 * kT * aj / den**2
        return di, dj


class ChitwoodModel(_AuxinPinModel):
    """Chitwood et al. transport: ``psi = p_i (exp(c2 a_i) - 1) / exp(c2 a_j)``."""

    name = "chitwood"

    def __init__(self, params):
        if params.c2 is None:
            raise ConfigError("Chitwood model requires c2")
        super().__init__(params)

    def psi(self, Yi, Yj):
        c2 = self.params.c2
        return (Yi[:, 1] * np.expm1(c2 * Yi[:, 0]) * np.exp(-c2 * Yj[:, 0]))[:, None]

    def d_psi(self, Yi, Yj):
        c2 = self.params.c2
        ai, pi_, aj = Yi[:, 0], Yi[:, 1], Yj[:, 0]
        ej = np.exp(-c2 * aj)
        di = np.zeros((Yi.shape[0], 1, 2))
        dj = np.zeros((Yi.shape[0], 1, 2))
        di[:, 0, 0] = pi_ * c2 * np.exp(c2 * ai) * ej
        di[:, 0, 1] = np.expm1(c2 * ai) * ej
        dj[:, 0, 0] = -c2 * pi_ * np.expm1(c2 * ai) * ej
        return di, dj


class FrozenPinSmithModel(ModelDefinition):
    """Auxin-only Smith model with a fixed, homogeneous PIN amount ``p_fixed``."""

    name = "frozen-pin-smith"
    m = 1
    component_names = ("a",)
    transported = (0,)

    def __init__(self, params):
        if params.p_fixed is None or params.kappa_T is None:
            raise ConfigError("frozen-PIN model requires p_fixed and kappa_T")
        super().__init__(params)

    def production(self, Y):
        q = self.params
        return q.rho_IAA / (1.0 + q.kappa_IAA * Y)

    def d_production(self, Y):
        q = self.params
        return (-q.rho_IAA * q.kappa_IAA / (1.0 + q.kappa_IAA * Y) ** 2)[:, :, None]

    def decay(self, Y):
        return self.params.mu_IAA * Y

    def d_decay(self, Y):
        return np.full((Y.shape[0], 1, 1), self.params.mu_IAA)

    def psi(self, Yi, Yj):
        q = self.params
        return q.p_fixed * Yi**2 / (1.0 + q.kappa_T * Yj**2)

    def d_psi(self, Yi, Yj):
        q = self.params
        den = 1.0 + q.kappa_T * Yj**2
        di = (2.0 * q.p_fixed * Yi / den)[:, :, None]
        dj = (-q.p_fixed * Yi**2 * 2.0 * q.kappa_T * Yj / den**2)[:, :, None]
        return di, dj

    def phi(self, Y):
        return np.exp(self.params.c1 * Y)

    def d_phi(self, Y):
        return (self.params.c1 * np.exp(self.params.c1 * Y))[:, :, None]

    def homogeneous(self):
        q = self.params
        return np.array([_positive_root(q.kappa_IAA, q.rho_IAA / q.mu_IAA)])


def smith_model(params: ModelParams) -> SmithModel:
    return SmithModel(params)


def chitwood_model(params: ModelParams) -> ChitwoodModel:
    return ChitwoodModel(params)


def frozen_pin_model(params: ModelParams) -> FrozenPinSmithModel:
    return FrozenPinSmithModel(params)


MODEL_IDS = {
    "smith": SmithModel,
    "chitwood": ChitwoodModel,
    "frozen-pin-smith": FrozenPinSmithModel,
}


def make_model(model_id: str, params: ModelParams) -> ModelDefinition:
    try:
        cls = MODEL_IDS[model_id]
    except KeyError:
        raise ConfigError(f"unknown model id '{model_id}' (choose from {', '.join(MODEL_IDS)})") from None
    return cls(params)


# -- assembly --------------------------------------------------------------

def _as_cells(model, tissue, state):
    y = np.asarray(state, dtype=float)
    if y.ndim != 1 or y.size != model.m * tissue.n:
        raise ShapeError(f"state has shape {y.shape}, expected ({model.m * tissue.n},)")
    return y.reshape(tissue.n, model.m)


def _segment_sum(index, values, n):
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n)
    return np.column_stack([np.bincount(index, weights=values[:, c], minlength=n) for c in range(values.shape[1])])


def _transport_pieces(model, tissue, Y):
    src, dst, l = tissue.edges
    phi = model.phi(Y)
    S = _segment_sum(src, l[:, None] * phi[dst], tissue.n)
    S = S + (tissue.ghosts * tissue.ghost_contact)[:, None] * phi
    psi = model.psi(Y[src], Y[dst])
    w = l[:, None] * phi[dst] / S[src]
    F = psi * w
    return phi, S, psi, w, F


def _net_transport(model, tissue, Y):
    """Unscaled ``sum_j F_ji - F_ij`` for the transported components, ``(n, k)``."""
    src, dst, _ = tissue.edges
    _, _, _, _, F = _transport_pieces(model, tissue, Y)
    return _segment_sum(dst, F, tissue.n) - _segment_sum(src, F, tissue.n)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):  # overflow upstream is reported here, not as a warning
        raise EvaluationError(f"non-finite values while evaluating the {what}")
    return arr


def assemble_residual(model: ModelDefinition, tissue: TissueGraph, state, T: float | None = None) -> np.ndarray:
    """Right-hand side of the ODE system at ``state`` (flat, cell-major)."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _residual(model, tissue, state, T)


def _residual(model, tissue, state, T):
    Y = _as_cells(model, tissue, state)
    T = model.params.T if T is None else T
    src, dst, l = tissue.edges
    V = tissue.volumes[:, None]
    R = model.production(Y) - model.decay(Y)
    Dv = model.diffusion
    if np.any(Dv):
        R = R + Dv[None, :] * _segment_sum(src, l[:, None] * (Y[dst] - Y[src]), tissue.n) / V
    if T != 0:
        net = _net_transport(model, tissue, Y)
        R[:, list(model.transported)] += T * net / V
    return _check_finite(R.reshape(-1), "residual")


def assemble_param_derivative(model: ModelDefinition, tissue: TissueGraph, state) -> np.ndarray:
    """Derivative of the residual with respect to ``T``."""
    Y = _as_cells(model, tissue, state)
    out = np.zeros_like(Y)
    out[:, list(model.transported)] = _net_transport(model, tissue, Y) / tissue.volumes[:, None]
    return _check_finite(out.reshape(-1), "parameter derivative")


def assemble_jacobian(model: ModelDefinition, tissue: TissueGraph, state, T: float | None = None) -> sp.csr_matrix:
    """Analytic sparse Jacobian of :func:`assemble_residual`."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _jacobian(model, tissue, state, T)


def _jacobian(model, tissue, state, T):
    Y = _as_cells(model, tissue, state)
    T = model.params.T if T is None else T
    n, m = tissue.n, model.m
    src, dst, l = tissue.edges
    V = tissue.volumes
    rows, cols, vals = [], [], []

    def add(r, c, v):
        r, c, v = np.broadcast_arrays(r, c, np.asarray(v, dtype=float))
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(v.ravel())

    cells = np.arange(n)
    comp = np.arange(m)
    local = model.d_production(Y) - model.d_decay(Y)
    add(cells[:, None, None] * m + comp[None, :, None],
        cells[:, None, None] * m + comp[None, None, :], local)

    Dv = model.diffusion
    for c in np.flatnonzero(Dv):
        add(src * m + c, dst * m + c, Dv[c] * l / V[src])
        diag = _segment_sum(src, l, n)
        add(cells * m + c, cells * m + c, -Dv[c] * diag / V)

    if T != 0:
        phi, S, psi, w, F = _transport_pieces(model, tissue, Y)
        dphi = model.d_phi(Y)
        dpsi_i, dpsi_j = model.d_psi(Y[src], Y[dst])
        out = _segment_sum(src, F, n)
        g = tissue.ghosts * tissue.ghost_contact
        scale = T / V
        e1, e2 = tissue.edge_pairs
        for t, ct in enumerate(model.transported):
            ccols = comp[None, :]
            # flux derivatives through psi and phi(y_j)
            d_first = dpsi_i[:, t, :] * w[:, t, None]
            d_second = dpsi_j[:, t, :] * w[:, t, None] + (psi[:, t] * l / S[src, t])[:, None] * dphi[dst, t, :]
            for rcell, sgn in ((src, -1.0), (dst, 1.0)):
                sc = (sgn * scale[rcell])[:, None]
                add((rcell * m + ct)[:, None], src[:, None] * m + ccols, sc * d_first)
                add((rcell * m + ct)[:, None], dst[:, None] * m + ccols, sc * d_second)
            # outflux denominator: row i, columns k in N_i
            coef = (scale[src] * out[src, t] * l / S[src, t])[:, None] * dphi[dst, t, :]
            add((src * m + ct)[:, None], dst[:, None] * m + ccols, coef)
            coef = (scale * out[:, t] * g / S[:, t])[:, None] * dphi[:, t, :]
            add((cells * m + ct)[:, None], cells[:, None] * m + ccols, coef)
            # influx denominator: row dst(e1), columns dst(e2), both edges leaving the same cell
            j = src[e1]
            coef = (-scale[dst[e1]] * F[e1, t] * l[e2] / S[j, t])[:, None] * dphi[dst[e2], t, :]
            add((dst[e1] * m + ct)[:, None], dst[e2][:, None] * m + ccols, coef)
            coef = (-scale[dst] * F[:, t] * g[src] / S[src, t])[:, None] * dphi[src, t, :]
            add((dst * m + ct)[:, None], src[:, None] * m + ccols, coef)

    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(vals)
    J = sp.coo_matrix((v, (r, c)), shape=(n * m, n * m)).tocsr()
    J.sum_duplicates()
    _check_finite(J.data, "Jacobian")
    return J


def auxin(model: ModelDefinition, state) -> np.ndarray:
    """Auxin sub-vector of a flat state."""
    return np.asarray(state).reshape(-1, model.m)[:, 0]


def auxin_norm(model: ModelDefinition, state) -> float:
    return float(np.linalg.norm(auxin(model, state)))
