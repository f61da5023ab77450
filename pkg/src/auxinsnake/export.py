"""CSV writers, run manifests and plot-ready data export."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ValidationError

__all__ = [
    "MANIFEST_NAME",
    "RunManifest",
    "write_manifest",
    "load_manifest",
    "write_csv",
    "read_csv",
    "branch_rows",
    "write_branch_csv",
    "write_spectrum_csv",
    "write_eigenfunction_csv",
    "write_trajectory_csv",
    "write_state_csv",
    "stability_segments",
    "hex_axial",
    "export_plotdata",
]

MANIFEST_NAME = "manifest.json"
BRANCH_COLUMNS = ("index", "T", "measure", "stability", "n_unstable_real", "n_unstable_complex_pairs", "event")


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str = __version__
    kind: str = ""
    name: str = ""
    wall_time: float = 0.0
    files: dict = field(default_factory=dict)  # relative path -> sha256
    scalars: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable)


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, complex):
        return [v.real, v.imag]
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_manifest(out: Path, manifest: RunManifest) -> RunManifest:
    """List and checksum every file under ``out``, then write the manifest last."""
    out = Path(out)
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != MANIFEST_NAME and not p.name.startswith(".tmp-"):
            files[p.relative_to(out).as_posix()] = _sha256(p)
    manifest.files = files
    _atomic_write(out / MANIFEST_NAME, manifest.to_json() + "\n")
    return manifest


def load_manifest(run_dir: str | Path) -> RunManifest:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.is_file():
        raise ValidationError(f"missing run manifest: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    return RunManifest(**data)


def write_csv(path: Path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])
    return path


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"missing upstream file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def branch_rows(branch) -> list[tuple]:
    rows = []
    for i, p in enumerate(branch.points):
        ev = ";".join(f"{kind}@{val:.6g}" for kind, val in p.events)
        rows.append((i, float(p.param), float(p.measure), p.stability, p.n_unstable_real, p.n_unstable_complex, ev))
    return rows


def write_branch_csv(path: Path, branch) -> Path:
    return write_csv(path, BRANCH_COLUMNS, branch_rows(branch))


def write_spectrum_csv(path: Path, eigenvalues) -> Path:
    lam = np.asarray(eigenvalues, dtype=complex)
    return write_csv(path, ("Re", "Im"), ((float(z.real), float(z.imag)) for z in lam))


def write_eigenfunction_csv(path: Path, vector, m: int) -> Path:
    v = np.asarray(vector, dtype=complex).reshape(-1, m)
    header = ["cell"]
    names = ("a", "p")[:m] if m <= 2 else tuple(f"y{k}" for k in range(m))
    for nm in names:
        header += [f"|{nm}|", f"Re {nm}", f"Im {nm}"]
    rows = []
    for i, row in enumerate(v):
        r = [i]
        for z in row:
            r += [float(abs(z)), float(z.real), float(z.imag)]
        rows.append(r)
    return write_csv(path, header, rows)


def write_trajectory_csv(path: Path, t, states, m: int, stride: int = 1) -> Path:
    A = np.asarray(states)[::stride].reshape(len(t[::stride]), -1, m)[:, :, 0]
    header = ["t"] + [f"a_{i + 1}" for i in range(A.shape[1])]
    return write_csv(path, header, ([float(tt)] + list(map(float, row)) for tt, row in zip(t[::stride], A)))


def hex_axial(tissue) -> np.ndarray | None:
    """Axial ``(q, r)`` coordinates for even-r offset hex grids, else ``None``."""
    if tissue.meta.get("kind") != "hex":
        return None
    cols = int(tissue.meta["cols"])
    idx = np.arange(tissue.n)
    r = idx // cols
    c = idx % cols
    q = c - (r + (r & 1)) // 2
    return np.column_stack([q, r])


def write_state_csv(path: Path, tissue, state, m: int) -> Path:
    Y = np.asarray(state, dtype=float).reshape(-1, m)
    names = ("a", "p")[:m]
    header = ["cell", "x", "y"]
    ax = hex_axial(tissue)
    if ax is not None:
        header += ["q", "r"]
    header += list(names)
    coords = tissue.coords if tissue.coords is not None else np.full((tissue.n, 2), np.nan)
    rows = []
    for i in range(tissue.n):
        r = [i, float(coords[i, 0]), float(coords[i, 1])]
        if ax is not None:
            r += [int(ax[i, 0]), int(ax[i, 1])]
        r += [float(v) for v in Y[i]]
        rows.append(r)
    return write_csv(path, header, rows)


def stability_segments(params, measures, stability) -> list[dict]:
    """Split a branch into maximal runs of equal stability.

    Consecutive segments share their boundary point so polylines join up.
    """
    segs = []
    start = 0
    n = len(params)
    for k in range(1, n + 1):
        if k == n or stability[k] != stability[start]:
            hi = min(k + 1, n)
            segs.append({"stability": stability[start], "x": list(params[start:hi]), "y": list(measures[start:hi])})
            start = k
    return segs


def _diagram(run_dir: Path, manifest: RunManifest, plot: Path) -> list[Path]:
    axis = manifest.scalars.get("axis", "T")
    scale = float(manifest.scalars.get("mean_contact", 1.0)) if axis == "T/<l>" else 1.0
    branch_files = sorted(p for p in manifest.files if Path(p).name.startswith("branch") and p.endswith(".csv"))
    if not branch_files:
        raise ValidationError(f"missing upstream file: {run_dir / 'branch.csv'}")
    out = []
    for bf in branch_files:
        header, rows = read_csv(run_dir / bf)
        col = {h: i for i, h in enumerate(header)}
        x = [float(r[col["T"]]) / scale for r in rows]
        y = [float(r[col["measure"]]) for r in rows]
        st = [r[col["stability"]] for r in rows]
        segs = stability_segments(x, y, st)
        rows_out = []
        for k, s in enumerate(segs):
            for xx, yy in zip(s["x"], s["y"]):
                rows_out.append((k, s["stability"], xx, yy))
        name = "diagram" + Path(bf).stem[len("branch"):] + ".csv"
        out.append(write_csv(plot / name, ("segment", "stability", axis, "norm_a"), rows_out))
    return out


def _snapshots(run_dir: Path, manifest: RunManifest, plot: Path, tissue, m: int) -> list[Path]:
    out = []
    for stem in ("states", "events"):
        npy, idx = run_dir / f"{stem}.npy", run_dir / f"{stem}.json"
        if f"{stem}.npy" not in manifest.files:
            continue
        if not npy.is_file() or not idx.is_file():
            raise ValidationError(f"missing upstream file: {npy if not npy.is_file() else idx}")
        X = np.load(npy)
        keys = json.loads(idx.read_text(encoding="utf-8"))
        for key, row in keys.items():
            out.append(write_state_csv(plot / f"snapshot_{stem}_{key}.csv", tissue, X[row], m))
    for name in ("state.csv",):
        if name in manifest.files:
            header, rows = read_csv(run_dir / name)
            out.append(write_csv(plot / f"snapshot_{name}", header, rows))
    return out


def _spectra(run_dir: Path, manifest: RunManifest, plot: Path) -> list[Path]:
    out = []
    for f in sorted(manifest.files):
        if Path(f).name.startswith("spectrum") and f.endswith(".csv"):
            header, rows = read_csv(run_dir / f)
            out.append(write_csv(plot / f"scatter_{Path(f).name}", header, rows))
    return out


def export_plotdata(run_dir: str | Path, which: str = "all") -> list[Path]:
    """Plot-ready CSVs under ``run_dir/plot``; the manifest is refreshed afterwards."""
    from .config import build_tissue, load_config
    from .model import make_model

    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    if which not in ("all", "diagram", "snapshots", "spectrum"):
        raise ValidationError(f"unknown export kind '{which}' (choose all, diagram, snapshots, spectrum)")
    cfg_path = run_dir / "config.ini"
    if not cfg_path.is_file():
        raise ValidationError(f"missing upstream file: {cfg_path}")
    for rel in manifest.files:
        if not (run_dir / rel).is_file():
            raise ValidationError(f"missing upstream file: {run_dir / rel}")
    cfg = load_config(cfg_path)
    plot = run_dir / "plot"
    plot.mkdir(exist_ok=True)
    out: list[Path] = []
    if which in ("all", "diagram") and manifest.kind in ("continue", "sweep"):
        out += _diagram(run_dir, manifest, plot)
    if which in ("all", "snapshots"):
        tissue = build_tissue(cfg.tissue)
        m = make_model(cfg.model, cfg.params).m
        out += _snapshots(run_dir, manifest, plot, tissue, m)
    if which in ("all", "spectrum"):
        out += _spectra(run_dir, manifest, plot)
    write_manifest(run_dir, manifest)
    return out
