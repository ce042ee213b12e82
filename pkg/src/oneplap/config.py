"""Run configuration: a line-oriented ``key = value`` file with ``[section]`` headers.

Every violation is collected before reporting, so one pass over a broken
file lists all of its problems.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field

COMMANDS = ("run", "sweep", "verify", "diagnose")
SCENARIOS = ("bingham", "spohn", "manufactured")


class ConfigError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


def _float(s):
    s = s.strip().lower()
    if s in ("inf", "infinity"):
        return math.inf
    return float(s)


def _int(s):
    return int(s.strip())


def _str(s):
    return s.strip()


def _bool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return tuple(_float(x) for x in s.replace(",", " ").split())


def _cylinders(s):
    out = []
    for chunk in s.split(";"):
        if not chunk.strip():
            continue
        parts = chunk.replace(",", " ").split()
        if len(parts) != 4:
            raise ValueError(f"cylinder {chunk.strip()!r} needs 'x y t0 r'")
        x, y, r = float(parts[0]), float(parts[1]), float(parts[3])
        t0 = parts[2] if parts[2] == "end" else float(parts[2])
        out.append((x, y, t0, r))
    return tuple(out)


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "command": (_str, None),
        "scenario": (_str, "bingham"),
        "family": (_str, "smooth-bump"),
        "seed": (_int, 0),
        "workers": (_int, 1),
        "slab": (_str, None),
    },
    "density": {
        "p": (_float, 2.0),
        "b1": (_float, 1.0),
        "bp": (_float, 1.0),
        "eps": (_float, 1e-3),
        "eps_list": (_floats, ()),
        "mode": (_str, "surrogate"),
    },
    "diagnostics": {
        "delta": (_float, 0.05),
        "nu": (_float, 0.125),
        "beta0": (_float, 0.5),
        "q": (_float, math.inf),
        "sigma": (_float, 3.0),
        "theta": (_float, 0.5),
        "plug_delta": (_float, 0.01),
        "cylinders": (_cylinders, ()),
        "holder": (_bool, True),
    },
    "grid": {
        "R": (_float, 1.0),
        "h": (_float, 1.0 / 64),
        "n": (_int, 32),
    },
    "stepper": {
        "dt": (_float, 0.5),
        "T": (_float, 1.0),
        "T_max": (_float, 50.0),
        "steady": (_bool, True),
        "steady_tol": (_float, 1e-8),
        "newton_tol": (_float, 1e-9),
        "newton_max": (_int, 100),
        "linear_tol": (_float, 1e-10),
        "damping": (_float, 0.5),
        "scheme": (_str, "euler"),
        "linear_solver": (_str, "direct"),
    },
    "scenario": {
        "f": (_float, 4.0),
        "mobility": (_float, 1.0),
        "initial": (_str, "cone"),
    },
}


@dataclass
class RunConfig:
    """Validated configuration; sections flattened into one namespace per section."""

    run: dict = field(default_factory=dict)
    density: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    stepper: dict = field(default_factory=dict)
    scenario: dict = field(default_factory=dict)

    @property
    def command(self):
        return self.run["command"]

    def items(self):
        for sec in SCHEMA:
            for key, val in getattr(self, sec).items():
                yield f"{sec}.{key}", val


def _read(text):
    cp = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";;"), comment_prefixes=("#",), strict=True
    )
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError([f"line {exc.lineno}: key outside any [section]: {exc.line.strip()!r}"]) from exc
    except configparser.DuplicateOptionError as exc:
        raise ConfigError([f"line {exc.lineno}: duplicate key {exc.section}.{exc.option}"]) from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError([f"line {exc.lineno}: duplicate section [{exc.section}]"]) from exc
    except configparser.ParsingError as exc:
        raise ConfigError([f"line {ln}: cannot parse {line.strip()!r}" for ln, line in exc.errors]) from exc
    return cp


def _check(cfg, errors):
    def need(cond, key, text):
        if not cond:
            errors.append(f"{key}: {text}")

    r, d, g, s, dg, sc = cfg.run, cfg.density, cfg.grid, cfg.stepper, cfg.diagnostics, cfg.scenario
    need(r["command"] is None or r["command"] in COMMANDS, "run.command", f"must be one of {COMMANDS}")
    need(r["scenario"] in SCENARIOS, "run.scenario", f"must be one of {SCENARIOS}")
    need(r["workers"] >= 1, "run.workers", "must be at least 1")
    need(d["p"] > 1, "density.p", "p must exceed 1")
    need(d["bp"] > 0, "density.bp", "bp must be positive")
    need(d["b1"] >= 0, "density.b1", "b1 must be non-negative")
    need(d["mode"] in ("surrogate", "quadrature"), "density.mode", "must be surrogate or quadrature")
    delta = dg["delta"]
    need(0 < delta < 1, "diagnostics.delta", "delta must lie in (0, 1)")
    for key, eps in [("density.eps", d["eps"])] + [("density.eps_list", e) for e in d["eps_list"]]:
        need(0 <= eps < 1, key, "eps must lie in [0, 1)")
        need(eps < delta / 8, key, f"eps << delta requires eps < delta/8 = {delta / 8:g} (got {eps:g})")
        if eps == 0:
            need(d["b1"] == 0 and d["p"] >= 2, key, "eps = 0 needs b1 = 0 and p >= 2")
    el = d["eps_list"]
    need(all(b < a for a, b in zip(el, el[1:])), "density.eps_list", "must be strictly decreasing")
    need(0 < dg["nu"] < 0.25, "diagnostics.nu", "nu must lie in (0, 1/4)")
    need(0 < dg["beta0"] < 1, "diagnostics.beta0", "beta0 must lie in (0, 1)")
    need(dg["q"] > 4, "diagnostics.q", "q must exceed n + 2 = 4")
    need(2 < dg["sigma"] < dg["q"] / 2, "diagnostics.sigma", "sigma must lie in (2, q/2)")
    need(0 < dg["theta"] < 1, "diagnostics.theta", "theta must lie in (0, 1)")
    need(dg["plug_delta"] > 0, "diagnostics.plug_delta", "must be positive")
    for c in dg["cylinders"]:
        need(c[3] > 0, "diagnostics.cylinders", f"radius must be positive in {c}")
    need(g["R"] > 0, "grid.R", "must be positive")
    need(g["h"] > 0, "grid.h", "must be positive")
    need(g["n"] >= 4, "grid.n", "must be at least 4")
    for key in ("dt", "T", "T_max", "newton_tol", "linear_tol", "steady_tol"):
        need(s[key] > 0, f"stepper.{key}", "must be positive")
    need(s["newton_max"] >= 1, "stepper.newton_max", "must be at least 1")
    need(0 < s["damping"] < 1, "stepper.damping", "must lie in (0, 1)")
    need(s["dt"] <= s["T"], "stepper.dt", "dt must not exceed T")
    need(s["scheme"] in ("euler", "bdf2"), "stepper.scheme", "must be euler or bdf2")
    need(s["linear_solver"] in ("direct", "cg"), "stepper.linear_solver", "must be direct or cg")
    if r["scenario"] == "bingham":
        need(sc["f"] > 0, "scenario.f", "pressure gradient f must be positive")
        need(d["p"] == 2, "density.p", "the pipe-flow scenario has p = 2")
    if r["scenario"] == "spohn":
        need(d["p"] == 3, "density.p", "the crystal scenario has p = 3")
    need(sc["initial"] in ("cone", "zero"), "scenario.initial", "must be cone or zero")


def parse_config(text):
    """Parse and validate; raises ConfigError listing every violation."""
    cp = _read(text)
    errors = []
    cfg = RunConfig()
    for sec in cp.sections():
        if sec not in SCHEMA:
            errors.append(f"[{sec}]: unknown section")
    for sec, keys in SCHEMA.items():
        vals = {k: default for k, (_, default) in keys.items()}
        if cp.has_section(sec):
            for key, raw in cp.items(sec):
                if key not in keys:
                    errors.append(f"{sec}.{key}: unknown key")
                    continue
                try:
                    vals[key] = keys[key][0](raw)
                except ValueError as exc:
                    errors.append(f"{sec}.{key}: cannot parse {raw!r} ({exc})")
        setattr(cfg, sec, vals)
    _check(cfg, errors)
    if errors:
        raise ConfigError(errors)
    return cfg
