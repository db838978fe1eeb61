"""INI experiment configuration: schema, defaults and validation.

Every section and key is listed in SCHEMA.  Unknown keys are rejected with a
nearest-name suggestion, and all violations are collected before raising.
"""
from __future__ import annotations

import configparser
import difflib
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import Potential, VelocityLaw
from .grid import GridError, GridSpec, WaveFunction, gaussian_packet, spreading_gaussian, superposition

KINDS = ("weak_velocity", "analytic_wv", "sweep", "characterize", "equivariance")

CHECKS = {
    "weak_velocity": ("bins_match_bohmian", "min_reliable_bins", "censored_fraction", "tau_sweep",
                      "headline_variant", "pointer_law", "pointer_mean"),
    "analytic_wv": ("weak_value_identity",),
    "sweep": ("tau_slope", "sigma_independence"),
    "characterize": ("cc_bohmian", "cc_variant_scaling", "witness_gradient_total",
                     "witness_constant", "triangle"),
    "equivariance": ("continuity", "transport_ks"),
}


class ConfigError(ValueError):
    """Configuration problems; .violations lists every one found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


def _float(s):
    return float(s)


def _int(s):
    v = float(s)
    if v != int(v):
        raise ValueError(f"{s!r} is not an integer")
    return int(v)


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{s!r} is not a boolean")


def _floats(s):
    vals = [float(t) for t in s.replace(";", ",").split(",") if t.strip()]
    if not vals:
        raise ValueError("empty list")
    return vals


def _words(s):
    return [t.strip() for t in s.replace(";", ",").split(",") if t.strip()]


def _packets(s):
    """'w, x0, s0, k0; w, x0, s0, k0' -> list of 4-tuples."""
    out = []
    for chunk in s.split(";"):
        if chunk.strip():
            vals = [float(t) for t in chunk.split(",")]
            if len(vals) != 4:
                raise ValueError("each packet needs weight, x0, s0, k0")
            out.append(tuple(vals))
    if not out:
        raise ValueError("no packets")
    return out


def _choice(*options):
    def parse(s):
        s = s.strip()
        if s not in options:
            raise ValueError(f"{s!r} is not one of {', '.join(options)}")
        return s
    return parse


# (parser, default); a default of None means "not set"
SCHEMA = {
    "experiment": {
        "kind": (_choice(*KINDS), None),
        "name": (str, None),
        "master_seed": (_int, 1234),
        "output": (str, None),
    },
    "grid": {"x_min": (_float, -20.0), "x_max": (_float, 20.0), "n": (_int, 1024)},
    "potential": {
        "type": (_choice("free", "harmonic", "barrier"), "free"),
        "omega": (_float, 1.0),
        "center": (_float, 0.0),
        "height": (_float, 1.0),
        "width": (_float, 1.0),
    },
    "state": {
        "type": (_choice("gaussian", "spreading", "superposition", "coherent"), "gaussian"),
        "x0": (_float, 0.0),
        "s0": (_float, 1.0),
        "k0": (_float, 0.0),
        "p0": (_float, 0.0),
        "t": (_float, 0.0),
        "packets": (_packets, None),
        "potential": (_choice("free", "harmonic", "barrier"), None),
    },
    "dynamics": {
        "law": (_choice("bohmian", "variant"), "bohmian"),
        "epsilon": (_float, 0.0),
        "hbar": (_float, 1.0),
        "mass": (_float, 1.0),
        "dt": (_float, 1e-3),
        "rk_steps": (_int, 50),
        "t_end": (_float, 1.0),
        "n_particles": (_int, 100000),
        "tail_transit": (_bool, True),
    },
    "protocol": {
        "sigma": (_float, 10.0),
        "tau": (_float, 0.05),
        "n_runs": (_int, 20000),
        "censor_bound": (_float, 0.01),
        "rho_min": (_float, 1e-8),
        "engine": (_choice("auto", "bank", "direct"), "auto"),
    },
    "estimator": {"delta": (_float, None), "n_min": (_int, 200)},
    "sweep": {"sigmas": (_floats, None), "taus": (_floats, None), "deltas": (_floats, None)},
    "characterize": {
        "sigmas": (_floats, [5.0, 10.0, 20.0]),
        "family_members": (_int, 9),
        "family_span": (_float, 1.0),
        "bulk_width": (_float, 2.0),
        "witness_sigma": (_float, 2.0),
        "epsilon": (_float, 0.2),
    },
    "checks": {
        "enabled": (_words, None),
        "z": (_float, 4.0),
        "bias_fraction": (_float, 0.05),
        "max_censored": (_float, 0.01),
        "tau_sweep": (_floats, [0.1, 0.05, 0.025]),
        "min_reliable_bins": (_int, 10),
        "ks_alpha": (_float, 0.01),
        "ks_min_n": (_int, 1000),
        "gap_threshold": (_float, 0.15),
        "central_width": (_float, 2.0),
        "richardson_taus": (_floats, [4e-4, 2e-4, 1e-4]),
        "identity_tol": (_float, 1e-4),
        "cc_tol": (_float, 1e-10),
        "slope": (_float, 1.0),
        "slope_tol": (_float, 0.3),
        "witness_fraction": (_float, 0.9),
        "constant_tol": (_float, 1e-12),
        "continuity_tol": (_float, 1e-6),
        "triangle_tol": (_float, 1e-10),
    },
}


def _section_kind(name: str) -> str:
    return "state" if name == "state" or name.startswith("state:") else name


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    kind: str
    name: str
    master_seed: int
    output: str
    grid: GridSpec
    sections: dict
    states: dict
    source: str = ""
    explicit: dict = field(default_factory=dict, repr=False)

    def get(self, section: str, key: str):
        return self.sections[section][key]

    @property
    def law(self) -> VelocityLaw:
        d = self.sections["dynamics"]
        units = dict(hbar=d["hbar"], mass=d["mass"])
        if d["law"] == "variant":
            return VelocityLaw.variant(d["epsilon"], **units)
        return VelocityLaw.bohmian(**units)

    def state_names(self):
        return list(self.states)

    def build_state(self, name: str | None = None) -> tuple[WaveFunction, Potential]:
        name = self.state_names()[0] if name is None else name
        return _build_state(self.grid, self.states[name], self.sections["potential"],
                            self.sections["dynamics"])

    @property
    def enabled_checks(self):
        chosen = self.sections["checks"]["enabled"]
        return list(CHECKS[self.kind]) if chosen is None else chosen

    def with_overrides(self, seed=None, output=None) -> "ExperimentConfig":
        kw = dict(self.__dict__)
        if seed is not None:
            kw["master_seed"] = int(seed)
        if output is not None:
            kw["output"] = str(output)
        return ExperimentConfig(**kw)

    def echo(self) -> str:
        """Canonical text of the resolved configuration (defaults filled in)."""
        lines = ["[experiment]", f"kind = {self.kind}", f"name = {self.name}",
                 f"master_seed = {self.master_seed}", ""]
        lines += ["[grid]", f"x_min = {self.grid.x_min!r}", f"x_max = {self.grid.x_max!r}",
                  f"n = {self.grid.n}", ""]
        for sec, values in self.sections.items():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {_fmt(v)}" for k, v in values.items() if v is not None]
            lines.append("")
        for sname, values in self.states.items():
            lines.append(f"[{sname}]")
            lines += [f"{k} = {_fmt(v)}" for k, v in values.items() if v is not None]
            lines.append("")
        return "\n".join(lines)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.echo().encode()).hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, list):
        if v and isinstance(v[0], tuple):
            return "; ".join(", ".join(repr(x) for x in p) for p in v)
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _build_potential(grid: GridSpec, kind: str, pot: dict, dyn: dict) -> Potential:
    units = dict(hbar=dyn["hbar"], mass=dyn["mass"])
    if kind == "harmonic":
        return Potential.harmonic(grid, pot["omega"], pot["center"], **units)
    if kind == "barrier":
        return Potential.gaussian_barrier(grid, pot["height"], pot["width"], pot["center"], **units)
    return Potential.free(grid, **units)


def _build_state(grid: GridSpec, st: dict, pot: dict, dyn: dict):
    kind = st["type"]
    units = dict(hbar=dyn["hbar"], mass=dyn["mass"])
    if kind == "spreading":
        psi = spreading_gaussian(grid, st["x0"], st["s0"], st["k0"], st["t"], **units)
    elif kind == "superposition":
        if not st["packets"]:
            raise GridError("superposition state needs 'packets'")
        psi = superposition(grid, st["packets"])
    elif kind == "coherent":
        # harmonic ground-state width, centre and momentum moved along the classical orbit
        w = pot["omega"]
        m, hbar = dyn["mass"], dyn["hbar"]
        c, s = np.cos(w * st["t"]), np.sin(w * st["t"])
        xc = st["x0"] * c + st["p0"] / (m * w) * s
        pc = st["p0"] * c - m * w * st["x0"] * s
        psi = gaussian_packet(grid, xc, np.sqrt(hbar / (2.0 * m * w)), pc / hbar)
    else:
        psi = gaussian_packet(grid, st["x0"], st["s0"], st["k0"])
    pkind = st["potential"] or pot["type"]
    if kind == "coherent" and st["potential"] is None:
        pkind = "harmonic"
    return psi, _build_potential(grid, pkind, pot, dyn)


def _suggest(key: str, options) -> str:
    close = difflib.get_close_matches(key, list(options), n=1)
    return f" (did you mean '{close[0]}'?)" if close else ""


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError([f"syntax: {err}"]) from err
    errors = []
    sections = {name: {k: d for k, (_, d) in keys.items()}
                for name, keys in SCHEMA.items() if name not in ("state", "experiment", "grid")}
    base = {name: {k: d for k, (_, d) in SCHEMA[name].items()} for name in ("experiment", "grid")}
    explicit: dict = {}
    states: dict = {}
    for sec in cp.sections():
        kind = _section_kind(sec)
        if kind not in SCHEMA:
            errors.append(f"[{sec}]: unknown section{_suggest(sec, SCHEMA)}")
            continue
        target = {k: d for k, (_, d) in SCHEMA["state"].items()} if kind == "state" else (
            base[kind] if kind in base else sections[kind])
        for key, raw in cp.items(sec):
            if key not in SCHEMA[kind]:
                errors.append(f"[{sec}] {key}: unknown key{_suggest(key, SCHEMA[kind])}")
                continue
            try:
                target[key] = SCHEMA[kind][key][0](raw)
                explicit.setdefault(sec, set()).add(key)
            except ValueError as err:
                errors.append(f"[{sec}] {key} = {raw!r}: {err}")
        if kind == "state":
            states[sec] = target
    if not states:
        states["state"] = {k: d for k, (_, d) in SCHEMA["state"].items()}

    exp = base["experiment"]
    if exp["kind"] is None:
        errors.append("[experiment] kind: required, one of " + ", ".join(KINDS))
    g = base["grid"]
    grid = None
    try:
        grid = GridSpec(g["x_min"], g["x_max"], g["n"])
    except GridError as err:
        errors.append(f"[grid]: {err}")

    errors += _validate(exp["kind"], sections, states)
    if grid is not None and not errors:
        for sname, st in states.items():
            try:
                _build_state(grid, st, sections["potential"], sections["dynamics"])
            except (GridError, ValueError) as err:
                errors.append(f"[{sname}]: {err}")
    if errors:
        raise ConfigError(errors)

    name = exp["name"] or Path(source).stem
    if sections["estimator"]["delta"] is None:
        sections["estimator"]["delta"] = 4.0 * grid.dx
    output = exp["output"] or str(Path("results") / name)
    return ExperimentConfig(exp["kind"], name, exp["master_seed"], output, grid, sections, states,
                            source, explicit)


def _validate(kind, sections, states):
    errors = []

    def positive(sec, key, allow_none=False):
        v = sections[sec][key]
        if v is None and allow_none:
            return
        vals = v if isinstance(v, list) else [v]
        if any(not (x > 0) for x in vals):
            errors.append(f"[{sec}] {key} = {v}: must be > 0")

    for key in ("sigma", "tau", "rho_min"):
        positive("protocol", key)
    positive("protocol", "n_runs")
    positive("dynamics", "dt")
    positive("dynamics", "rk_steps")
    positive("dynamics", "t_end")
    positive("dynamics", "n_particles")
    positive("dynamics", "hbar")
    positive("dynamics", "mass")
    positive("estimator", "delta", allow_none=True)
    positive("estimator", "n_min")
    positive("potential", "omega")
    positive("characterize", "sigmas")
    positive("characterize", "witness_sigma")
    positive("checks", "tau_sweep")
    positive("checks", "richardson_taus")
    cb = sections["protocol"]["censor_bound"]
    if not 0 <= cb <= 1:
        errors.append(f"[protocol] censor_bound = {cb}: must lie in [0, 1]")
    for sec in ("sweep",):
        for key in ("sigmas", "taus", "deltas"):
            v = sections[sec][key]
            if v is not None and any(not x > 0 for x in v):
                errors.append(f"[{sec}] {key} = {v}: must be > 0")
    if kind == "sweep":
        for key in ("sigmas", "taus"):
            if sections["sweep"][key] is None:
                errors.append(f"[sweep] {key}: required for a sweep experiment")
    if kind in CHECKS and sections["checks"]["enabled"] is not None:
        for c in sections["checks"]["enabled"]:
            if c not in CHECKS[kind]:
                errors.append(f"[checks] enabled: unknown check {c!r} for {kind}"
                              f"{_suggest(c, CHECKS[kind])}")
    for sname, st in states.items():
        if not st["s0"] > 0:
            errors.append(f"[{sname}] s0 = {st['s0']}: must be > 0")
        if st["type"] == "superposition" and not st["packets"]:
            errors.append(f"[{sname}] packets: required for a superposition state")
    return errors


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"{path}: no such file"])
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as err:
        raise ConfigError([f"{path}: {err}"]) from err
    return parse_config_text(text, str(path))
