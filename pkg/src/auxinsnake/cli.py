"""Command-line interface.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, TISSUE_SCHEMA, TissueSpec, build_tissue, load_config, preset
from .errors import AuxinError, NumericalError, ValidationError

log = logging.getLogger("auxinsnake")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3

RUN_COMMANDS = ("asymptotic", "solve", "continue", "sweep", "spectrum", "simulate", "periodic")


def _parse_set(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _apply_sets(cfg, pairs):
    """Override ``[run]`` settings from ``--set key=value``."""
    from .config import RUN_SCHEMA, _typed

    if not pairs:
        return cfg
    typed = _typed("run", RUN_SCHEMA[cfg.kind], pairs.items())
    return cfg.with_settings(**typed)


def _print_manifest(m):
    print(json.dumps({"kind": m.kind, "name": m.name, "wall_time": round(m.wall_time, 3), "scalars": m.scalars}, indent=2, default=str))


def cmd_tissue(args) -> int:
    if args.action == "validate":
        from .tissue import load_tissue

        g = load_tissue(args.path)
        deg = g.degree
        print(
            json.dumps(
                {
                    "cells": g.n,
                    "edges": int(deg.sum()),
                    "degree_min": int(deg.min()),
                    "degree_max": int(deg.max()),
                    "regular": g.is_regular,
                    "mean_contact": g.mean_contact,
                    "mean_volume": g.mean_volume,
                    "digest": g.digest(),
                },
                indent=2,
            )
        )
        return EXIT_OK
    from .config import _typed
    from .tissue import save_tissue

    if args.builder not in TISSUE_SCHEMA or args.builder == "file":
        raise ValidationError(f"unknown builder {args.builder!r}")
    spec = TissueSpec(args.builder, _typed("tissue", TISSUE_SCHEMA[args.builder], _parse_set(args.arg).items()))
    g = build_tissue(spec)
    save_tissue(g, args.output)
    print(f"wrote {g.n} cells to {args.output}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .runner import run

    if args.command == "spectrum" and args.point is not None:
        return _spectrum_at_point(args)
    if args.config is None:
        raise ValidationError(f"{args.command}: a config file is required")
    cfg = load_config(args.config, kind=args.command)
    cfg = _apply_sets(cfg, _parse_set(args.set))
    m = run(cfg, args.out)
    _print_manifest(m)
    return EXIT_OK


def _spectrum_at_point(args) -> int:
    """Spectrum of a stored branch point of an earlier ``continue`` run."""
    from .export import load_manifest, write_manifest, write_spectrum_csv, RunManifest
    from .model import make_model
    from .spectra import spectrum

    if args.branch is None:
        raise ValidationError("spectrum --point needs --branch RUN_DIR")
    run_dir = Path(args.branch)
    load_manifest(run_dir)
    cfg = load_config(run_dir / "config.ini")
    idx_path = run_dir / "states.json"
    if not idx_path.is_file():
        raise ValidationError(f"missing upstream file: {idx_path} (rerun with save_states = true)")
    keys = json.loads(idx_path.read_text(encoding="utf-8"))
    if str(args.point) not in keys:
        raise ValidationError(f"--point {args.point}: no stored state (0..{len(keys) - 1})")
    y = np.load(run_dir / "states.npy")[keys[str(args.point)]]
    import csv

    with open(run_dir / "branch.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    T = float(rows[1 + args.point][1])
    model = make_model(cfg.model, cfg.params)
    tissue = build_tissue(cfg.tissue)
    rep = spectrum(model, tissue, y, mode=args.mode, T=T, want_vectors=False)
    out = Path(args.out or run_dir / f"spectrum_point{args.point}")
    out.mkdir(parents=True, exist_ok=True)
    write_spectrum_csv(out / "spectrum.csv", rep.eigenvalues)
    m = write_manifest(
        out,
        RunManifest(cfg.digest(), kind="spectrum", name=f"{cfg.name}:point{args.point}", scalars={"T": T, "point": args.point, "stability": rep.stability, "n_unstable_real": rep.n_unstable_real, "n_unstable_complex_pairs": rep.n_unstable_complex}),
    )
    _print_manifest(m)
    return EXIT_OK


def cmd_preset(args) -> int:
    if args.name is None or args.name not in PRESETS:
        msg = f"unknown preset {args.name!r}; available: {', '.join(PRESETS)}" if args.name else f"available presets: {', '.join(PRESETS)}"
        if args.name is None:
            print(msg)
            return EXIT_OK
        raise ValidationError(msg)
    cfg = preset(args.name, args.scale)
    if args.write:
        Path(args.write).write_text(cfg.to_text(), encoding="utf-8")
    if args.run:
        from .runner import run

        _print_manifest(run(cfg, args.out or f"runs/{cfg.name}"))
    elif not args.write:
        sys.stdout.write(cfg.to_text())
    return EXIT_OK


def cmd_export(args) -> int:
    from .export import export_plotdata

    files = export_plotdata(args.run_dir, args.which)
    for f in files:
        print(f)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="auxinsnake", description="Auxin pattern formation: steady states, continuation, spectra, simulation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("tissue", help="build or validate tissue files")
    tsub = t.add_subparsers(dest="action", required=True)
    tb = tsub.add_parser("build")
    tb.add_argument("builder", help="line | ring | hex | voronoi")
    tb.add_argument("output")
    tb.add_argument("arg", nargs="*", help="builder arguments as key=value (e.g. rows=14 cols=14)")
    tv = tsub.add_parser("validate")
    tv.add_argument("path")
    t.set_defaults(func=cmd_tissue)

    for name in RUN_COMMANDS:
        r = sub.add_parser(name, help=f"run a '{name}' experiment from a config file")
        r.add_argument("config", nargs="?")
        r.add_argument("--out", help="output directory (overrides the config)")
        r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a [run] setting")
        if name == "spectrum":
            r.add_argument("--point", type=int, help="branch point index of an earlier continue run")
            r.add_argument("--branch", help="run directory holding that branch")
            r.add_argument("--mode", default="auto", choices=("auto", "full", "rightmost"))
        r.set_defaults(func=cmd_run)

    pr = sub.add_parser("preset", help="emit or run a figure preset")
    pr.add_argument("name", nargs="?")
    pr.add_argument("--scale", type=float, default=1.0, help="shrink the domain (0 < scale <= 1)")
    pr.add_argument("--write", metavar="FILE", help="write the config to FILE")
    pr.add_argument("--run", action="store_true", help="run the preset")
    pr.add_argument("--out", help="output directory for --run")
    pr.set_defaults(func=cmd_preset)

    ex = sub.add_parser("export", help="plot-ready CSVs from a finished run")
    ex.add_argument("run_dir")
    ex.add_argument("--which", default="all", choices=("all", "diagram", "snapshots", "spectrum"))
    ex.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except AuxinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
