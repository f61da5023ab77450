"""Jacobian spectra, stability classification and Hopf detection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AuxinError
from .model import ModelDefinition, assemble_jacobian
from .tissue import TissueGraph

log = logging.getLogger(__name__)

__all__ = [
    "SpectrumReport",
    "HopfEvent",
    "ZERO_TOL",
    "DENSE_LIMIT",
    "spectrum",
    "spectrum_of_matrix",
    "detect_hopf",
    "hopf_eigenfunction_profile",
    "eigenpair_residuals",
]

ZERO_TOL = 1e-8
DENSE_LIMIT = 6000
AUTO_DENSE = 1200


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray | None = None
    mode: str = "full"
    partial: bool = False
    zero_tol: float = ZERO_TOL

    def __post_init__(self):
        order = np.lexsort((-self.eigenvalues.imag, -self.eigenvalues.real))
        self.eigenvalues = self.eigenvalues[order]
        if self.eigenvectors is not None:
            self.eigenvectors = self.eigenvectors[:, order]

    @property
    def rightmost(self) -> complex:
        return complex(self.eigenvalues[0])

    @property
    def unstable(self) -> np.ndarray:
        return self.eigenvalues[self.eigenvalues.real > self.zero_tol]

    @property
    def n_unstable_real(self) -> int:
        u = self.unstable
        return int(np.sum(np.abs(u.imag) <= self.zero_tol))

    @property
    def n_unstable_complex(self) -> int:
        """Number of complex-conjugate pairs in the open right half-plane."""
        u = self.unstable
        return int(np.sum(u.imag > self.zero_tol))

    @property
    def stability(self) -> str:
        return "stable" if self.unstable.size == 0 else "unstable"

    @property
    def classification(self) -> str:
        if self.stability == "stable":
            return "stable"
        return f"unstable({self.n_unstable_real}, {self.n_unstable_complex})"

    def conjugate_pairing_error(self) -> float:
        """Largest distance from a computed eigenvalue to the nearest conjugate of another."""
        lam = self.eigenvalues
        if self.partial or lam.size == 0:
            return 0.0
        conj = np.sort_complex(np.conj(lam))
        return float(np.max(np.abs(np.sort_complex(lam) - conj)))


def spectrum_of_matrix(
    J,
    mode: str = "full",
    k: int = 20,
    sigma: float = 0.05,
    m: int = 1,
    want_vectors: bool = True,
    window: float | None = None,
) -> SpectrumReport:
    """Eigenvalues of a (sparse) Jacobian.

    ``mode='full'`` densifies and calls LAPACK; ``'rightmost'`` computes the
    ``k`` eigenvalues closest to the real shift ``sigma`` by shift-invert
    Arnoldi on a sparse LU factorisation; ``'auto'`` picks by size.
    With ``window`` only eigenvectors with ``|Re| < window`` are kept.
    """
    N = J.shape[0]
    if mode == "auto":
        mode = "full" if N <= AUTO_DENSE else "rightmost"
    if mode == "full":
        if N > DENSE_LIMIT:
            raise ValueError(f"dense spectrum limited to {DENSE_LIMIT} unknowns (got {N}); use mode='rightmost'")
        A = J.toarray() if sp.issparse(J) else np.asarray(J)
        if want_vectors:
            lam, vec = sla.eig(A, check_finite=True)
        else:
            lam, vec = sla.eigvals(A, check_finite=True), None
        rep = SpectrumReport(lam.astype(complex), vec, "full")
    elif mode == "rightmost":
        k = min(k, N - 2)
        Jc = sp.csc_matrix(J)
        lu = spla.splu(Jc - sigma * sp.identity(N, format="csc"))
        op = spla.LinearOperator((N, N), matvec=lu.solve, dtype=float)
        partial = False
        try:
            lam, vec = spla.eigs(Jc, k=k, sigma=sigma, OPinv=op, which="LM", tol=1e-12)
        except spla.ArpackNoConvergence as exc:
            lam, vec = exc.eigenvalues, exc.eigenvectors
            partial = True
        rep = SpectrumReport(np.asarray(lam, dtype=complex), vec if want_vectors else None, "rightmost", partial)
    else:
        raise ValueError(f"unknown spectrum mode {mode!r}")
    if window is not None and rep.eigenvectors is not None:
        keep = np.abs(rep.eigenvalues.real) < window
        rep.eigenvectors = np.where(keep[None, :], rep.eigenvectors, np.nan)
    return rep


def spectrum(
    model: ModelDefinition,
    tissue: TissueGraph,
    state,
    mode: str = "full",
    T: float | None = None,
    k: int = 20,
    want_vectors: bool = True,
    check_residual: float | None = 1e-6,
) -> SpectrumReport:
    """Spectrum of the steady-state Jacobian at ``state``."""
    if check_residual is not None:
        from .model import assemble_residual

        r = float(np.max(np.abs(assemble_residual(model, tissue, state, T=T))))
        if r > check_residual:
            log.warning("spectrum requested at a non-steady state (|R|=%.2e)", r)
    J = assemble_jacobian(model, tissue, state, T=T)
    return spectrum_of_matrix(J, mode=mode, k=k, m=model.m, want_vectors=want_vectors)


def eigenpair_residuals(J, report: SpectrumReport) -> np.ndarray:
    """``|J v - lam v| / |v|`` for every eigenpair with a stored vector."""
    V = report.eigenvectors
    A = J.toarray() if sp.issparse(J) else np.asarray(J)
    out = []
    for i, lam in enumerate(report.eigenvalues):
        v = V[:, i]
        if np.any(np.isnan(v)):
            continue
        out.append(np.linalg.norm(A @ v - lam * v) / np.linalg.norm(v))
    return np.array(out)


@dataclass
class HopfEvent:
    param: float
    omega: float
    eigenvalue: complex
    eigenfunction: np.ndarray
    state: np.ndarray
    index: int
    direction: str  # "destabilising" or "stabilising" as the branch is traversed
    m: int = 2
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> float:
        return self.param


def _counts(problem, y, lam, mode):
    rep = spectrum_of_matrix(problem.jacobian(y, lam), mode=mode, m=problem.model.m, want_vectors=False)
    return rep.n_unstable_real, rep.n_unstable_complex


def detect_hopf(
    branch,
    problem=None,
    model: ModelDefinition | None = None,
    tissue: TissueGraph | None = None,
    tol: float = 1e-3,
    mode: str = "auto",
    max_bisections: int = 60,
) -> list[HopfEvent]:
    """Find complex-pair crossings of the imaginary axis along a branch.

    Consecutive points whose count of unstable complex pairs differs, while
    the count of unstable real eigenvalues stays the same, bracket a Hopf
    point; the bracket is bisected in arclength (re-solving the steady
    state) until the parameter is known to within ``tol``.
    """
    from .continuation import SteadyProblem, point_on_segment

    if problem is None:
        problem = SteadyProblem(model, tissue, branch.meta.get("param", "T"))
    pts = branch.points
    for p in pts:
        if p.n_unstable_complex < 0:
            p.n_unstable_real, p.n_unstable_complex = _counts(problem, p.state, p.param, mode)
            p.stability = "stable" if p.n_unstable_real + p.n_unstable_complex == 0 else "unstable"
    events = []
    for k in range(len(pts) - 1):
        p0, p1 = pts[k], pts[k + 1]
        dc = p1.n_unstable_complex - p0.n_unstable_complex
        dr = p1.n_unstable_real - p0.n_unstable_real
        if dc == 0 or dr != 0:
            continue
        c0 = p0.n_unstable_complex
        a, b = 0.0, p1.ds
        ya, la = p0.state, p0.param
        yb, lb = p1.state, p1.param
        try:
            for _ in range(max_bisections):
                if abs(lb - la) < tol and (b - a) < 1e-2 * p1.ds + 1e-10:
                    break
                s = 0.5 * (a + b)
                y, lam, _ = point_on_segment(problem, branch, k, s)
                _, c = _counts(problem, y, lam, mode)
                if c == c0:
                    a, ya, la = s, y, lam
                else:
                    b, yb, lb = s, y, lam
        except AuxinError as exc:
            log.warning("Hopf refinement near index %d failed: %s", k, exc)
        # eigenvalue closest to the axis with positive imaginary part
        best = None
        for y, lam in ((ya, la), (yb, lb)):
            rep = spectrum_of_matrix(problem.jacobian(y, lam), mode=mode, m=problem.model.m)
            cand = [(abs(ev.real), i) for i, ev in enumerate(rep.eigenvalues) if ev.imag > ZERO_TOL]
            if not cand:
                continue
            _, i = min(cand)
            ev = rep.eigenvalues[i]
            if best is None or abs(ev.real) < abs(best[0].real):
                best = (ev, rep.eigenvectors[:, i], y, lam)
        if best is None:
            continue
        ev, vec, y, lam = best
        vec = vec / np.linalg.norm(vec)
        T_c = 0.5 * (la + lb)
        direction = "destabilising" if dc > 0 else "stabilising"
        hev = HopfEvent(float(T_c), float(abs(ev.imag)), complex(ev), vec, np.array(y), k, direction, problem.model.m)
        events.append(hev)
        pts[k].events.append(("hopf", hev.param))
    branch.hopfs = events
    return events


def hopf_eigenfunction_profile(event: HopfEvent, m: int | None = None) -> np.ndarray:
    """Per-cell modulus of the auxin component, normalised to a maximum of 1."""
    m = m or event.m
    v = np.asarray(event.eigenfunction).reshape(-1, m)[:, 0]
    mag = np.abs(v)
    peak = mag.max()
    return mag / peak if peak > 0 else mag
