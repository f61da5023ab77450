"""Dispatch an :class:`ExperimentConfig` to the numerical modules and write its outputs."""

from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from .asymptotics import first_order_no_diffusion, first_order_with_diffusion, geometric_coefficients, homogeneous_state
from .config import ExperimentConfig, build_tissue
from .continuation import (
    ContinuationSettings,
    SteadyProblem,
    continue_branch,
    detect_folds,
    newton_solve,
    snaking_width,
    sweep,
)
from .errors import ConfigError
from .export import (
    MANIFEST_NAME,
    RunManifest,
    write_branch_csv,
    write_csv,
    write_eigenfunction_csv,
    write_manifest,
    write_spectrum_csv,
    write_state_csv,
    write_trajectory_csv,
)
from .integrate import IntegratorSettings, find_periodic_state, integrate, wave_arrival_times
from .model import auxin, auxin_norm, make_model
from .spectra import detect_hopf, spectrum

log = logging.getLogger(__name__)

__all__ = ["run", "initial_state", "continuation_settings", "state_at"]


def continuation_settings(cfg: ExperimentConfig) -> ContinuationSettings:
    mf = cfg.setting("max_folds")
    return ContinuationSettings(
        ds0=cfg.setting("ds0"),
        ds_min=cfg.setting("ds_min"),
        ds_max=cfg.setting("ds_max"),
        max_points=cfg.setting("max_points"),
        max_folds=mf if mf > 0 else None,
        stability=cfg.setting("stability"),
        eig_mode=cfg.setting("eig_mode"),
        tol_residual=cfg.setting("tol_residual"),
    )


def initial_state(kind: str, model, tissue, seed: int, noise: float, T: float | None = None) -> np.ndarray:
    """``homogeneous``, ``noise`` (homogeneous plus Gaussian noise), ``steady`` or a ``.npy`` path."""
    base = homogeneous_state(model).tile(tissue.n)
    if kind == "homogeneous":
        return base
    if kind == "noise":
        rng = np.random.default_rng(seed)
        return base + noise * rng.standard_normal(base.size)
    if kind == "steady":
        return state_at(model, tissue, model.params.T if T is None else T)
    path = Path(kind)
    if path.suffix == ".npy" and path.is_file():
        y = np.load(path)
        if y.size != base.size:
            raise ConfigError(f"[run] initial: {path} holds {y.size} values, expected {base.size}")
        return y.astype(float)
    raise ConfigError(f"[run] initial: expected homogeneous, noise, steady or an existing .npy file, got {kind!r}")


def state_at(model, tissue, T: float, settings: ContinuationSettings | None = None):
    """Steady state at ``T`` on the primary branch, reached by continuation from ``T = 0``."""
    y0 = homogeneous_state(model).tile(tissue.n)
    if T == 0:
        return y0
    s = settings or ContinuationSettings(stability=False)
    s = ContinuationSettings(**{**s.__dict__, "stability": False})
    br = continue_branch(model, tissue, y0, (0.0, T), s)
    # last point at or below T before the parameter first exceeds it
    k = next((i for i, p in enumerate(br.points) if p.param >= T), len(br.points) - 1)
    guess = br.points[max(k - 1, 0)].state
    return newton_solve(model, tissue, guess, T=T).state


def _axis(tissue) -> tuple[str, float]:
    if tissue.is_regular:
        return "T", 1.0
    return "T/<l>", float(tissue.mean_contact)


def _run_asymptotic(cfg, model, tissue, out: Path) -> dict:
    T = cfg.setting("T")
    Ds = cfg.setting("D_values") or (model.params.D,)
    geo = geometric_coefficients(tissue)
    base = homogeneous_state(model)
    cols = [geo.xi]
    header = ["cell", "xi"]
    sc = {"a_star": base.a, "p_star": base.p, "T": T, "xi_min": float(geo.xi.min()), "xi_max": float(geo.xi.max())}
    sols = {}
    for D in Ds:
        mD = model.with_params(D=D)
        sol = first_order_with_diffusion(mD, tissue, T) if D > 0 else first_order_no_diffusion(mD, tissue, T)
        sols[D] = sol
        y = sol.evaluate(T).reshape(-1, model.m)
        for k, nm in enumerate(model.component_names):
            header += [f"eta_{nm}[D={D:g}]", f"{nm}[D={D:g}]"]
            cols += [sol.eta[:, k], y[:, k]]
        sc[f"argmax_alpha[D={D:g}]"] = int(np.argmax(sol.alpha))
    rows = [[i] + [float(c[i]) for c in cols] for i in range(tissue.n)]
    write_csv(out / "asymptotic.csv", header, rows)
    compare = cfg.setting("compare_T")
    if compare:
        sol = sols[Ds[-1]] if model.params.D in sols else first_order_with_diffusion(model, tissue)
        y = base.tile(tissue.n)
        rows = []
        worst = 0.0
        for Tc in sorted(compare):
            y = newton_solve(model, tissue, y, T=Tc).state
            a = auxin(model, y)
            approx = sol.evaluate(Tc).reshape(-1, model.m)[:, 0]
            err = float(np.linalg.norm(a - approx) / np.linalg.norm(a))
            rows.append((Tc, float(np.linalg.norm(a)), float(np.linalg.norm(approx)), err))
            if Tc <= 0.2:
                worst = max(worst, err)
        write_csv(out / "compare.csv", ("T", "norm_a_numeric", "norm_a_asymptotic", "rel_error"), rows)
        sc["max_rel_error_T_le_0.2"] = worst
    return sc


def _run_solve(cfg, model, tissue, out: Path) -> dict:
    T = cfg.setting("T")
    y0 = initial_state(cfg.setting("initial"), model, tissue, cfg.seed, cfg.setting("noise"), T)
    res = newton_solve(model, tissue, y0, T=T)
    write_state_csv(out / "state.csv", tissue, res.state, model.m)
    np.save(out / "state.npy", res.state)
    return {"T": T, "iterations": res.iterations, "residual_norm": res.residual_norm, "norm_a": auxin_norm(model, res.state)}


def _save_states(out: Path, stem: str, states: dict) -> None:
    if not states:
        return
    keys = list(states)
    np.save(out / f"{stem}.npy", np.array([states[k] for k in keys]))
    (out / f"{stem}.json").write_text(json.dumps({k: i for i, k in enumerate(keys)}, indent=1) + "\n", encoding="utf-8")


def _run_continue(cfg, model, tissue, out: Path) -> dict:
    s = continuation_settings(cfg)
    lo, hi = cfg.setting("T_min"), cfg.setting("T_max")
    problem = SteadyProblem(model, tissue, "T")
    y0 = homogeneous_state(model).tile(tissue.n)
    br = continue_branch(problem, None, y0, (lo, hi), s)
    folds = detect_folds(br, problem)
    hopfs = detect_hopf(br, problem, mode=s.eig_mode) if (s.stability and cfg.setting("hopf")) else []
    write_branch_csv(out / "branch.csv", br)
    axis, scale = _axis(tissue)
    ev_rows = []
    ev_states = {}
    for k, f in enumerate(folds):
        ev_rows.append(("fold-" + f.kind, f.index, f.param, f.param / scale, f.measure, ""))
        ev_states[f"fold{k}"] = f.state
    for k, h in enumerate(hopfs):
        ev_rows.append(("hopf", h.index, h.param, h.param / scale, auxin_norm(model, h.state), h.omega))
        ev_states[f"hopf{k}"] = h.state
    ev_rows.sort(key=lambda r: (r[1], r[2]))
    write_csv(out / "events.csv", ("event", "index", "T", "T_scaled", "measure", "omega"), ev_rows)
    _save_states(out, "events", ev_states)
    if cfg.setting("save_states"):
        _save_states(out, "states", {str(i): p.state for i, p in enumerate(br.points)})
    return {
        "n_points": len(br),
        "reason": br.reason,
        "axis": axis,
        "mean_contact": float(tissue.mean_contact),
        "folds": [f.param for f in folds],
        "fold_kinds": [f.kind for f in folds],
        "hopfs": [h.param for h in hopfs],
        "TP1": folds[0].param if folds else None,
        "HP1": next((h.param for h in hopfs if h.direction == "destabilising"), None),
        "snaking_width": snaking_width(folds),
    }


def _run_sweep(cfg, model, tissue, out: Path) -> dict:
    s = continuation_settings(cfg)
    values = cfg.setting("values")
    if not values:
        raise ConfigError("[run] values: at least one sweep value is required")
    name = cfg.setting("sweep_param")
    res = sweep(model, tissue, name, values, (cfg.setting("T_min"), cfg.setting("T_max")), s, workers=cfg.setting("workers"))
    rows = []
    folds_by = []
    widths = []
    for k, (v, br) in enumerate(zip(values, res)):
        if isinstance(br, Exception):
            rows.append((k, v, 0, f"error: {br}", -1, "", ""))
            folds_by.append(None)
            widths.append(None)
            continue
        write_branch_csv(out / f"branch_{k:02d}.csv", br)
        w = snaking_width(br.folds)
        rows.append((k, v, len(br), br.reason, len(br.folds), w, ";".join(f"{f.kind}@{f.param:.6g}" for f in br.folds)))
        folds_by.append([f.param for f in br.folds])
        widths.append(w)
    write_csv(out / "sweep.csv", ("index", name, "n_points", "reason", "n_folds", "snaking_width", "folds"), rows)
    axis, scale = _axis(tissue)
    return {"sweep_param": name, "values": list(values), "folds": folds_by, "snaking_widths": widths, "axis": axis, "mean_contact": float(tissue.mean_contact)}


def _run_spectrum(cfg, model, tissue, out: Path) -> dict:
    s = continuation_settings(cfg)
    T = cfg.setting("T")
    y = state_at(model, tissue, T, s)
    rep = spectrum(model, tissue, y, mode=cfg.setting("mode"), T=T, k=cfg.setting("k"), want_vectors=False)
    write_spectrum_csv(out / "spectrum.csv", rep.eigenvalues)
    write_state_csv(out / "state.csv", tissue, y, model.m)
    sc = {
        "T": T,
        "rightmost": [rep.rightmost.real, rep.rightmost.imag],
        "stability": rep.stability,
        "n_unstable_real": rep.n_unstable_real,
        "n_unstable_complex_pairs": rep.n_unstable_complex,
        "partial": rep.partial,
    }
    Tm = cfg.setting("hopf_T_max")
    if Tm > 0:
        s2 = ContinuationSettings(**{**s.__dict__, "stability": True})
        problem = SteadyProblem(model, tissue, "T")
        br = continue_branch(problem, None, homogeneous_state(model).tile(tissue.n), (0.0, Tm), s2)
        hopfs = detect_hopf(br, problem, mode=s.eig_mode)
        for k, h in enumerate(hopfs[: cfg.setting("n_eigenfunctions")]):
            write_eigenfunction_csv(out / f"eigenfunction_hopf{k}.csv", h.eigenfunction, model.m)
        sc["hopfs"] = [h.param for h in hopfs]
        sc["hopf_omegas"] = [h.omega for h in hopfs]
    return sc


def _run_simulate(cfg, model, tissue, out: Path) -> dict:
    T = cfg.setting("T")
    T = model.params.T if math.isnan(T) else T
    y0 = initial_state(cfg.setting("initial"), model, tissue, cfg.seed, cfg.setting("noise"), T)
    sdt = cfg.setting("sample_dt")
    st = IntegratorSettings(rtol=cfg.setting("rtol"), atol=cfg.setting("atol"), sample_dt=sdt or None, stride=cfg.setting("stride"))
    tr = integrate(model, tissue, y0, (0.0, cfg.setting("t_end")), st, T=T)
    write_trajectory_csv(out / "trajectory.csv", tr.t, tr.states, model.m)
    write_state_csv(out / "final.csv", tissue, tr.final, model.m)
    return {
        "T": T,
        "status": tr.status,
        "n_steps": tr.n_steps,
        "n_rejected": tr.n_rejected,
        "t_final": float(tr.t[-1]),
        "positivity_violations": len(tr.positivity_violations),
        "norm_a_final": auxin_norm(model, tr.final),
    }


def _run_periodic(cfg, model, tissue, out: Path) -> dict:
    s = continuation_settings(cfg)
    off = cfg.setting("offset")
    T_h = cfg.setting("T_hopf")
    problem = SteadyProblem(model, tissue, "T")
    if T_h <= 0:
        s2 = ContinuationSettings(**{**s.__dict__, "stability": True, "max_folds": 1})
        br = continue_branch(problem, None, homogeneous_state(model).tile(tissue.n), (0.0, cfg.setting("hopf_T_max")), s2)
        hopfs = [h for h in detect_hopf(br, problem, mode=s.eig_mode) if h.direction == "destabilising"]
        if not hopfs:
            return {"found": False, "reason": "no Hopf point on the primary branch"}
        T_h = hopfs[0].param
    T_lo, T_hi = T_h * (1 - off), T_h * (1 + off)
    y0 = state_at(model, tissue, T_lo, s)
    cell = cfg.setting("observable_cell")
    st = IntegratorSettings(rtol=cfg.setting("rtol"), atol=cfg.setting("atol"))
    res = find_periodic_state(
        model,
        tissue,
        T_hi,
        y0,
        burn_in=cfg.setting("burn_in"),
        record=cfg.setting("record"),
        sample_dt=cfg.setting("sample_dt"),
        observable_cell=None if cell < 0 else cell,
        settings=st,
    )
    sc = {"T_hopf": T_h, "T_init": T_lo, "T": T_hi, "found": res.found, "reason": res.reason, "observable_cell": res.meta["cell"]}
    if res.found:
        est = res.estimate
        write_trajectory_csv(out / "cycle.csv", res.cycle.t, res.cycle.states, model.m)
        cells, times = wave_arrival_times(res.trajectory, model.m, est.period, res.meta["cell"])
        write_csv(out / "wave.csv", ("cell", "arrival_time"), zip(cells.tolist(), times.tolist()))
        sc.update(
            period=est.period,
            spread=est.spread,
            n_cycles=est.n_cycles,
            wave_cells=len(cells),
            wave_monotone=bool(np.all(np.diff(times) >= 0)),
        )
    return sc


_RUNNERS = {
    "asymptotic": _run_asymptotic,
    "solve": _run_solve,
    "continue": _run_continue,
    "sweep": _run_sweep,
    "spectrum": _run_spectrum,
    "simulate": _run_simulate,
    "periodic": _run_periodic,
}


def run(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunManifest:
    """Execute ``cfg`` and return its manifest.

    The manifest is removed at the start and written only after every
    output exists, so an interrupted run leaves no manifest behind.
    """
    out = Path(out_dir or cfg.output or f"runs/{cfg.name or cfg.kind}")
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST_NAME).unlink(missing_ok=True)
    t0 = time.perf_counter()
    (out / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
    model = make_model(cfg.model, cfg.params)
    tissue = build_tissue(cfg.tissue)
    if cfg.tissue.builder != "file":
        from .tissue import save_tissue

        save_tissue(tissue, out / "tissue.json")
    scalars = _RUNNERS[cfg.kind](cfg, model, tissue, out)
    scalars["tissue_digest"] = tissue.digest()
    manifest = RunManifest(cfg.digest(), kind=cfg.kind, name=cfg.name, wall_time=time.perf_counter() - t0, scalars=scalars)
    return write_manifest(out, manifest)
