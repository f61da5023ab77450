"""Experiment configuration files and figure presets.

A config is a single ``key = value`` file with four sections::

    [experiment]   name, kind, model, seed, output
    [tissue]       builder (line | ring | hex | voronoi | file) and its arguments
    [params]       ModelParams overrides
    [run]          settings for the run kind

Unknown keys are rejected with the offending section and key named.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import MODEL_IDS, PARAM_KEYS, ModelParams
from .tissue import (
    TissueGraph,
    build_hex_grid,
    build_line,
    build_ring,
    build_voronoi_disc,
    load_tissue,
)

__all__ = [
    "RUN_KINDS",
    "TissueSpec",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "build_tissue",
    "PRESETS",
    "preset",
]

RUN_KINDS = ("asymptotic", "solve", "continue", "sweep", "spectrum", "simulate", "periodic")


def _floatlist(raw: str) -> tuple[float, ...]:
    """Comma/space separated floats, or ``start:stop:num`` for an even grid."""
    raw = raw.strip()
    if not raw:
        return ()
    if ":" in raw:
        parts = raw.split(":")
        if len(parts) != 3:
            raise ValueError("grid must be start:stop:num")
        return tuple(float(v) for v in np.linspace(float(parts[0]), float(parts[1]), int(parts[2])))
    return tuple(float(v) for v in raw.replace(",", " ").split())


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


_CONT = {
    "ds0": (float, 1e-3),
    "ds_min": (float, 1e-5),
    "ds_max": (float, 5e-2),
    "max_points": (int, 20000),
    "max_folds": (int, 0),  # 0: no limit
    "stability": (_bool, True),
    "eig_mode": (str, "auto"),
    "tol_residual": (float, 1e-10),
}

RUN_SCHEMA: dict[str, dict] = {
    "asymptotic": {
        "T": (float, 3e-5),
        "D_values": (_floatlist, ()),
        "compare_T": (_floatlist, ()),
    },
    "solve": {
        "T": (float, 0.0),
        "initial": (str, "homogeneous"),
        "noise": (float, 1e-3),
    },
    "continue": {
        "T_min": (float, 0.0),
        "T_max": (float, 1.0),
        "hopf": (_bool, True),
        "save_states": (_bool, False),
        **_CONT,
    },
    "sweep": {
        "sweep_param": (str, "rho_IAA"),
        "values": (_floatlist, ()),
        "T_min": (float, 0.0),
        "T_max": (float, 1.0),
        "workers": (int, 1),
        **{**_CONT, "stability": (_bool, False)},
    },
    "spectrum": {
        "T": (float, 1.0),
        "mode": (str, "auto"),
        "k": (int, 20),
        "hopf_T_max": (float, 0.0),  # 0: no Hopf search
        "n_eigenfunctions": (int, 2),
        **_CONT,
    },
    "simulate": {
        "T": (float, math.nan),  # nan: use params.T
        "t_end": (float, 1000.0),
        "initial": (str, "noise"),
        "noise": (float, 1e-3),
        "rtol": (float, 1e-6),
        "atol": (float, 1e-9),
        "sample_dt": (float, 0.0),  # 0: keep accepted steps
        "stride": (int, 1),
    },
    "periodic": {
        "offset": (float, 0.02),
        "T_hopf": (float, 0.0),  # 0: detect along the branch
        "hopf_T_max": (float, 3.0),
        "burn_in": (float, 5000.0),
        "record": (float, 3000.0),
        "sample_dt": (float, 1.0),
        "observable_cell": (int, -1),  # -1: boundary peak of the initial state
        "rtol": (float, 1e-6),
        "atol": (float, 1e-9),
        **{**_CONT, "stability": (_bool, True)},
    },
}

TISSUE_SCHEMA: dict[str, dict] = {
    "line": {"n": (int, 150), "V": (float, 1.0), "l": (float, 1.0), "left": (str, "neumann"), "right": (str, "free")},
    "ring": {"n": (int, 150), "V": (float, 1.0), "l": (float, 1.0)},
    "hex": {"rows": (int, 14), "cols": (int, 14), "l": (float, 1.0)},
    "voronoi": {
        "n": (int, 200),
        "seed": (int, 0),
        "mean_area": (float, 294.0),
        "mean_contact": (float, 0.0),  # 0: use wall thickness
        "wall_thickness": (float, 0.4),
        "depth": (float, 1.0),
        "lloyd_iterations": (int, 30),
    },
    "file": {"path": (str, "")},
}


@dataclass(frozen=True)
class TissueSpec:
    builder: str
    args: dict = field(default_factory=dict)

    def to_lines(self) -> list[str]:
        return [f"builder = {self.builder}"] + [f"{k} = {_fmt(v)}" for k, v in self.args.items()]


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    model: str
    tissue: TissueSpec
    params: ModelParams = ModelParams()
    settings: dict = field(default_factory=dict)
    name: str = ""
    seed: int = 0
    output: str = ""

    def __post_init__(self):
        if self.kind not in RUN_KINDS:
            raise ConfigError(f"[experiment] kind: unknown run kind '{self.kind}' (choose from {', '.join(RUN_KINDS)})")
        if self.model not in MODEL_IDS:
            raise ConfigError(f"[experiment] model: unknown model id '{self.model}' (choose from {', '.join(MODEL_IDS)})")

    def setting(self, key: str):
        if key in self.settings:
            return self.settings[key]
        return RUN_SCHEMA[self.kind][key][1]

    def to_text(self) -> str:
        lines = ["[experiment]"]
        if self.name:
            lines.append(f"name = {self.name}")
        lines += [f"kind = {self.kind}", f"model = {self.model}", f"seed = {self.seed}"]
        if self.output:
            lines.append(f"output = {self.output}")
        lines += ["", "[tissue]"] + self.tissue.to_lines()
        lines += ["", "[params]"] + self.params.to_config_text().splitlines()
        lines += ["", "[run]"] + [f"{k} = {_fmt(v)}" for k, v in sorted(self.settings.items())]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """Hash of the canonical text, ignoring the output directory."""
        return hashlib.sha256(dataclasses.replace(self, output="").to_text().encode()).hexdigest()

    def with_settings(self, **changes) -> "ExperimentConfig":
        schema = RUN_SCHEMA[self.kind]
        for k in changes:
            if k not in schema:
                raise ConfigError(f"[run] {k}: unknown setting for kind '{self.kind}'")
        return dataclasses.replace(self, settings={**self.settings, **changes})


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _typed(section: str, schema: dict, items) -> dict:
    out = {}
    for key, raw in items:
        if key not in schema:
            raise ConfigError(f"[{section}] {key}: unknown key (allowed: {', '.join(schema)})")
        conv = schema[key][0]
        try:
            out[key] = conv(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    return out


def parse_config(text: str, kind: str | None = None) -> ExperimentConfig:
    """Parse config text; ``kind`` (e.g. from the CLI subcommand) overrides the file."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    unknown = set(cp.sections()) - {"experiment", "tissue", "params", "run"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    exp = dict(cp.items("experiment")) if cp.has_section("experiment") else {}
    bad = set(exp) - {"name", "kind", "model", "seed", "output"}
    if bad:
        raise ConfigError(f"[experiment] {sorted(bad)[0]}: unknown key")
    kind = kind or exp.get("kind")
    if not kind:
        raise ConfigError("[experiment] kind: missing")
    if kind not in RUN_KINDS:
        raise ConfigError(f"[experiment] kind: unknown run kind '{kind}' (choose from {', '.join(RUN_KINDS)})")
    model = exp.get("model", "smith")
    try:
        seed = int(exp.get("seed", 0))
    except ValueError:
        raise ConfigError(f"[experiment] seed: not an integer ({exp['seed']!r})") from None

    if not cp.has_section("tissue"):
        raise ConfigError("[tissue]: section missing")
    t_items = dict(cp.items("tissue"))
    builder = t_items.pop("builder", None)
    if builder not in TISSUE_SCHEMA:
        raise ConfigError(f"[tissue] builder: unknown builder {builder!r} (choose from {', '.join(TISSUE_SCHEMA)})")
    t_args = _typed("tissue", TISSUE_SCHEMA[builder], t_items.items())

    p_items = dict(cp.items("params")) if cp.has_section("params") else {}
    pvals = {}
    for key, raw in p_items.items():
        if key not in PARAM_KEYS:
            raise ConfigError(f"[params] {key}: unknown parameter")
        try:
            pvals[key] = None if raw.strip().lower() == "none" else float(raw)
        except ValueError:
            raise ConfigError(f"[params] {key}: not a number ({raw!r})") from None
    try:
        params = ModelParams().replace(**pvals)
    except ConfigError as exc:
        raise ConfigError(f"[params] {exc}") from None

    r_items = cp.items("run") if cp.has_section("run") else []
    settings = _typed("run", RUN_SCHEMA[kind], r_items)
    return ExperimentConfig(
        kind=kind,
        model=model,
        tissue=TissueSpec(builder, t_args),
        params=params,
        settings=settings,
        name=exp.get("name", ""),
        seed=seed,
        output=exp.get("output", ""),
    )


def load_config(path: str | Path, kind: str | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, kind)


def build_tissue(spec: TissueSpec) -> TissueGraph:
    a = {k: v for k, v in TISSUE_SCHEMA[spec.builder].items()}
    args = {k: spec.args.get(k, d[1]) for k, d in a.items()}
    if spec.builder == "line":
        return build_line(args["n"], args["V"], args["l"], args["left"], args["right"])
    if spec.builder == "ring":
        return build_ring(args["n"], args["V"], args["l"])
    if spec.builder == "hex":
        return build_hex_grid(args["rows"], args["cols"], args["l"])
    if spec.builder == "voronoi":
        return build_voronoi_disc(
            args["n"],
            seed=args["seed"],
            mean_area=args["mean_area"],
            target_mean_contact=args["mean_contact"] or None,
            wall_thickness=args["wall_thickness"],
            depth=args["depth"],
            lloyd_iterations=args["lloyd_iterations"],
        )
    if not args["path"]:
        raise ConfigError("[tissue] path: required for builder 'file'")
    return load_tissue(args["path"])


# -- presets -------------------------------------------------------------------

# mean contact of the published irregular tissue; volumes average 294
IRREGULAR_MEAN_CONTACT = 13.26
IRREGULAR_CELLS = 742


def _scaled(n: int, scale: float, minimum: int) -> int:
    return max(minimum, int(round(n * scale)))


def _line(scale):
    return TissueSpec("line", {"n": _scaled(150, scale, 10)})


def _hex(scale):
    k = _scaled(50, scale, 4)
    return TissueSpec("hex", {"rows": k, "cols": k})


def _voronoi(scale):
    return TissueSpec("voronoi", {"n": _scaled(IRREGULAR_CELLS, scale, 20), "seed": 0, "mean_contact": IRREGULAR_MEAN_CONTACT})


def _p(**kw) -> ModelParams:
    return ModelParams().replace(**kw)


def _fig2(scale):
    return ExperimentConfig("asymptotic", "smith", _line(scale), _p(rho_IAA=0.85, D=1.0), {"T": 3e-5, "D_values": (0.0, 0.06, 0.18)}, "fig2")


def _fig3(scale):
    return ExperimentConfig("continue", "smith", _line(scale), _p(rho_IAA=0.85, D=1.0), {"T_min": 0.0, "T_max": 6.0}, "fig3")


def _fig4(scale):
    s = {"T": 2.0, "hopf_T_max": 2.3, "n_eigenfunctions": 2, "max_folds": 1}
    return ExperimentConfig("spectrum", "smith", _line(scale), _p(rho_IAA=0.85, D=1.0), s, "fig4")


def _fig5(scale):
    s = {"T": 0.1, "compare_T": tuple(float(v) for v in np.round(np.linspace(0.025, 0.5, 20), 6))}
    return ExperimentConfig("asymptotic", "smith", _line(scale), _p(rho_IAA=0.85, D=1.0), s, "fig5")


def _fig6(scale):
    return ExperimentConfig("periodic", "smith", _line(scale), _p(rho_IAA=0.85, D=1.0), {"offset": 0.02}, "fig6")


def _fig7(scale):
    s = {"sweep_param": "rho_IAA", "values": tuple(float(v) for v in np.linspace(0.3, 1.5, 20)), "T_min": 0.0, "T_max": 6.0, "max_folds": 8, "max_points": 3000}
    return ExperimentConfig("sweep", "smith", _line(scale), _p(D=1.0), s, "fig7")


def _fig8(scale):
    return ExperimentConfig("continue", "smith", _hex(scale), _p(rho_IAA=1.5, D=1.0), {"T_min": 0.0, "T_max": 2.0}, "fig8")


def _fig9(scale):
    return ExperimentConfig("asymptotic", "smith", _hex(scale), _p(rho_IAA=1.5, D=1.0), {"T": 1e-3, "D_values": (0.0, 1.0)}, "fig9")


def _fig10(scale):
    s = {"T_min": 0.0, "T_max": 120.0, "ds_max": 0.5}
    return ExperimentConfig("continue", "smith", _voronoi(scale), _p(rho_IAA=1.5, D=1.0), s, "fig10")


def _fig11(scale):
    s = {"T_min": 0.0, "T_max": 2.5}
    return ExperimentConfig("continue", "chitwood", _hex(scale), _p(rho_IAA=2.0, D=1.0, kappa_T=None, c2=0.588), s, "fig11")


def _fig12(scale):
    s = {"T_min": 0.0, "T_max": 95.0, "ds_max": 0.5}
    return ExperimentConfig("continue", "chitwood", _voronoi(scale), _p(rho_IAA=1.5, D=1.0, kappa_T=None, c2=0.405), s, "fig12")


PRESETS = {
    "fig2": _fig2,
    "fig3": _fig3,
    "fig4": _fig4,
    "fig5": _fig5,
    "fig6": _fig6,
    "fig7": _fig7,
    "fig8": _fig8,
    "fig9": _fig9,
    "fig10": _fig10,
    "fig11": _fig11,
    "fig12": _fig12,
}


def preset(name: str, scale: float = 1.0) -> ExperimentConfig:
    """Config reproducing one figure; ``scale`` shrinks the domain, parameters stay per cell."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}' (available: {', '.join(PRESETS)})")
    if not 0 < scale <= 1:
        raise ConfigError(f"scale must lie in (0, 1], got {scale}")
    return PRESETS[name](scale)
