"""Batch front end: ``oneplap {run,sweep,verify,diagnose} --config PATH``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import scenarios, suites
from .config import ConfigError, parse_config
from .diagnostics import (
    cylinder_record,
    facet_mask,
    holder_fit,
    subgradient_witness,
    truncated_slab,
)
from .energy import DensityParams, MollifiedDensity, fit_constants
from .grid import DomainError, Grid, ParabolicCylinder, ScalarField, read_slab_csv, write_slab_csv
from .solver import SolverError, StepperConfig, run

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class Report:
    """Ordered ``key = value [tag]`` lines; floats with 17 significant digits."""

    def __init__(self):
        self.lines = []

    def add(self, key, value, tag):
        self.lines.append(f"{key} = {_fmt(value)} [{tag}]")

    def extend(self, prefix, record):
        for key, (value, tag) in record.items():
            self.add(f"{prefix}{key}", value, tag)

    def text(self):
        return "\n".join(self.lines) + "\n"


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if isinstance(v, tuple):
        return " ".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def _stepper(cfg):
    s = cfg.stepper
    return StepperConfig(
        dt=s["dt"],
        newton_tol=s["newton_tol"],
        newton_max=s["newton_max"],
        linear_tol=s["linear_tol"],
        damping=s["damping"],
        scheme=s["scheme"],
        linear_solver=s["linear_solver"],
    )


def _pipe_spec(cfg):
    return scenarios.BinghamPipeSpec(R=cfg.grid["R"], b1=cfg.density["b1"], b2=cfg.density["bp"], f=cfg.scenario["f"])


def _density(cfg, eps=None):
    d = cfg.density
    return MollifiedDensity(DensityParams(d["p"], d["b1"], d["bp"]), d["eps"] if eps is None else eps, mode=d["mode"])


def scenario_grid(cfg):
    """The grid a scenario runs on, rebuilt from the config alone."""
    sc = cfg.run["scenario"]
    if sc == "bingham":
        return Grid.disk(cfg.grid["R"], cfg.grid["h"])
    n = cfg.grid["n"]
    if sc == "spohn":
        return Grid.rectangle(n + 1, n + 1, 2.0 / n, origin=(-1.0, -1.0))
    return Grid.unit_square(n)


def _cylinders(cfg, slab):
    out = []
    for x, y, t0, r in cfg.diagnostics["cylinders"]:
        out.append(ParabolicCylinder((x, y), float(slab.times[-1]) if t0 == "end" else t0, r))
    return out


def diagnose_slab(cfg, slab, report, out, seed):
    """Per-cylinder records plus phi.csv and holder.csv; returns the failure count."""
    dg, eps = cfg.diagnostics, cfg.density["eps"]
    failures = 0
    phi_rows, holder_rows = [], []
    for k, Q in enumerate(_cylinders(cfg, slab)):
        pre = f"cylinder.{k}."
        try:
            rec = cylinder_record(
                slab, Q, dg["delta"], eps, dg["nu"], cfg.density["p"], seed, dg["theta"], dg["sigma"]
            )
        except DomainError as exc:
            report.add(pre + "error", str(exc).replace("\n", " "), "measured")
            failures += 1
            continue
        report.extend(pre, rec)
        for s in (1.0, 0.5, 0.25, 0.125):
            phi_rows.append(f"{k},{s:.17g},{Q.r * s:.17g},{rec['phi_' + format(s, 'g')][0]:.17g}")
        if dg["holder"]:
            try:
                est = holder_fit(truncated_slab(slab, 2 * dg["delta"], eps), slab, Q, seed=seed)
            except DomainError:
                continue
            for d, o in est.pairs:
                holder_rows.append(f"{k},{d:.17g},{o:.17g}")
    (out / "phi.csv").write_text("cylinder,sigma,radius,phi\n" + "".join(r + "\n" for r in phi_rows))
    if dg["holder"]:
        (out / "holder.csv").write_text("cylinder,d_p,oscillation\n" + "".join(r + "\n" for r in holder_rows))
    return failures


def _config_lines(cfg, report):
    for key, val in cfg.items():
        report.add("config." + key, val, "configured")


def _fitted(cfg, report, seed):
    dens = _density(cfg, max(cfg.density["eps"], 1e-6))
    fc = fit_constants(dens, n=10_000, seed=seed)
    for key, val in fc.as_dict().items():
        report.add("fitted." + key, val, "fitted")


def _write_slab(out, slab):
    with open(out / "slab.csv", "w", newline="") as fh:
        write_slab_csv(slab, fh)


def _witness(cfg, density, grid, u, report):
    if density.params.b1 > 0 and density.eps > 0:
        w = subgradient_witness(ScalarField(grid, u), density, cfg.diagnostics["delta"])
        report.add("witness.max_ratio", w.max_ratio, "measured")
        report.add("witness.max_misalignment", w.max_misalignment, "measured")
        report.add("witness.alignment_c", w.alignment_c, "fitted")
        report.add("witness.n_aligned", w.n_aligned, "measured")


def cmd_run(cfg, out, seed):
    report = Report()
    _config_lines(cfg, report)
    _fitted(cfg, report, seed)
    scfg = _stepper(cfg)
    sc = cfg.run["scenario"]
    s = cfg.stepper
    if sc == "bingham":
        spec = _pipe_spec(cfg)
        eps = cfg.density["eps"]
        if s["steady"]:
            res = scenarios.run_bingham(
                spec, eps, cfg.grid["h"], scfg, T_max=s["T_max"], steady_tol=s["steady_tol"],
                plug_delta=cfg.diagnostics["plug_delta"], mode=cfg.density["mode"],
            )
            solve, problem = res.result, res.problem
            report.add("bingham.rel_linf", res.rel_linf, "measured")
            report.add("bingham.plug_estimate", res.plug_estimate, "measured")
            report.add("bingham.plug_exact", res.plug_exact, "configured")
            report.add("bingham.plug_uncertainty", 2 * cfg.grid["h"], "configured")
            report.add("bingham.steady_residual", res.steady_residual, "measured")
            report.add("bingham.anisotropy", res.anisotropy, "measured")
        else:
            problem = scenarios.bingham_problem(spec, eps, cfg.grid["h"], s["T"], cfg.density["mode"])
            solve = run(problem, scfg)
    elif sc == "spohn":
        res = scenarios.run_spohn(
            scfg, cfg.scenario["mobility"], cfg.density["eps"], cfg.grid["n"], s["T"],
            cfg.diagnostics["delta"], cfg.scenario["initial"],
        )
        solve, problem = res.result, res.problem
        report.add("spohn.facet_area_initial", float(res.facet_areas[0]), "measured")
        report.add("spohn.facet_area_final", float(res.facet_areas[-1]), "measured")
        report.add("spohn.energy_initial", float(res.energies[0]), "measured")
        report.add("spohn.energy_final", float(res.energies[-1]), "measured")
        report.add("spohn.energy_monotone", bool(np.all(np.diff(res.energies) <= 1e-12)), "measured")
    else:
        d = cfg.density
        case = scenarios.manufactured_case(cfg.run["family"], cfg.grid["n"], s["T"], d["eps"], d["p"], d["b1"], d["bp"])
        problem = case.problem
        solve = run(problem, scfg)
        worst, final_l2, final_max = scenarios.oracle_errors(case, solve.slab)
        report.add("oracle.max_l2", worst, "measured")
        report.add("oracle.final_l2", final_l2, "measured")
        report.add("oracle.final_max", final_max, "measured")
    slab = solve.slab
    report.add("run.n_steps", len(solve.records), "measured")
    report.add("run.t_final", float(slab.times[-1]), "measured")
    report.add("run.newton_total", int(sum(solve.newton_iterations)), "measured")
    report.add("run.newton_max", int(max(solve.newton_iterations, default=0)), "measured")
    _witness(cfg, problem.density, problem.grid, slab.values[-1], report)
    fm = facet_mask(ScalarField(problem.grid, slab.values[-1]), cfg.diagnostics["delta"], problem.density.eps)
    report.add("facet.n_components", fm.n_components, "measured")
    report.add("facet.total_area", float(np.sum(fm.areas)), "measured")
    _write_slab(out, slab)
    (out / "steps.csv").write_text("\n".join(solve.log_lines()) + "\n")
    failures = diagnose_slab(cfg, slab, report, out, seed)
    (out / "report.txt").write_text(report.text())
    return EXIT_FAIL if failures else EXIT_OK


def cmd_diagnose(cfg, out, seed):
    path = cfg.run["slab"]
    if not path:
        raise ConfigError(["run.slab: diagnose needs the path of a slab CSV"])
    grid = scenario_grid(cfg)
    with open(path, newline="") as fh:
        slab = read_slab_csv(fh, grid)
    report = Report()
    _config_lines(cfg, report)
    failures = diagnose_slab(cfg, slab, report, out, seed)
    (out / "report.txt").write_text(report.text())
    return EXIT_FAIL if failures else EXIT_OK


def cmd_sweep(cfg, out, seed, workers):
    if cfg.run["scenario"] != "bingham":
        raise ConfigError(["run.scenario: sweeps are defined for the pipe-flow scenario"])
    eps_list = cfg.density["eps_list"] or (cfg.density["eps"],)
    if len(eps_list) < 2:
        print("oneplap sweep: warning: a single eps gives an empty pairwise table", file=sys.stderr)
    builder = scenarios.bingham_builder(_pipe_spec(cfg), cfg.grid["h"], cfg.stepper["T"], cfg.density["mode"])
    res = scenarios.epsilon_sweep(builder, eps_list, _stepper(cfg), cfg.diagnostics["delta"], cfg.density["p"], workers)
    rows = "".join(f"{a:.17g},{b:.17g},{lp:.17g},{sup:.17g}\n" for a, b, lp, sup in res.rows())
    (out / "sweep.csv").write_text("eps_i,eps_j,lp_dist,sup_trunc_dist\n" + rows)
    report = Report()
    _config_lines(cfg, report)
    report.add("sweep.n_members", len(eps_list), "configured")
    report.add("sweep.cauchy_lp", res.cauchy_lp, "measured")
    report.add("sweep.cauchy_sup", res.cauchy_sup, "measured")
    for (a, b), v in sorted(res.final_lp_dist.items(), key=lambda kv: (-kv[0][0], -kv[0][1])):
        report.add(f"sweep.final_slice_lp.{a:.17g}.{b:.17g}", v, "measured")
    for e, iters in res.records.items():
        report.add(f"sweep.newton_total.{e:.17g}", int(sum(iters)), "measured")
    (out / "report.txt").write_text(report.text())
    return EXIT_OK


def cmd_verify(cfg, out, seed):
    results = suites.run_all(seed=seed)
    report = Report()
    for res in results:
        key = res.name.replace(" ", "_")
        report.add(f"suite.{key}.passed", res.passed, "measured")
        for k, v in res.details.items():
            if isinstance(v, list):
                v = tuple(v)
            report.add(f"suite.{key}.{k}", v, "fitted" if k.split(".")[-1] in ("K", "lam", "Lam") else "measured")
        print(res.line())
    (out / "report.txt").write_text(report.text())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def execute(cfg, out="out", seed=None, workers=None):
    """Run the configured command; returns the exit status."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.run["seed"] if seed is None else seed
    workers = cfg.run["workers"] if workers is None else workers
    cmd = cfg.command
    if cmd == "run":
        return cmd_run(cfg, out, seed)
    if cmd == "diagnose":
        return cmd_diagnose(cfg, out, seed)
    if cmd == "sweep":
        return cmd_sweep(cfg, out, seed, workers)
    if cmd == "verify":
        return cmd_verify(cfg, out, seed)
    raise ConfigError([f"run.command: unknown command {cmd!r}"])


def main(argv=None):
    ap = argparse.ArgumentParser(prog="oneplap", description=__doc__)
    ap.add_argument("command", choices=("run", "sweep", "verify", "diagnose"))
    ap.add_argument("--config", type=Path, help="configuration file; defaults apply when omitted")
    ap.add_argument("--out", type=Path, default=Path("out"))
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int)
    args = ap.parse_args(argv)
    try:
        text = args.config.read_text(encoding="utf-8") if args.config else ""
        cfg = parse_config(text)
        cfg.run["command"] = args.command
        if args.workers is not None and args.workers < 1:
            raise ConfigError(["--workers: must be at least 1"])
        return execute(cfg, args.out, args.seed, args.workers)
    except ConfigError as exc:
        print(f"oneplap: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DomainError, SolverError) as exc:
        print(f"oneplap {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
