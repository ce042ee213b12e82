"""Curated problems with oracles: pipe flow with a yield stress, crystal
surface relaxation, manufactured solutions, and the regularization sweep."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diagnostics import facet_mask, plug_radius
from .energy import DensityParams, MollifiedDensity
from .grid import DomainError, Grid, ScalarField, nodal_gradient
from .solver import (
    Discretization,
    ProblemSpec,
    SolverError,
    StepContext,
    _residual_and_matrix,
    residual_norm,
    run,
)
from .truncation import g_delta_eps

# ---------------------------------------------------------------------------
# pipe flow


@dataclass(frozen=True)
class BinghamPipeSpec:
    R: float = 1.0
    b1: float = 1.0
    b2: float = 1.0
    f: object = 4.0
    eps_list: tuple = ()

    def __post_init__(self):
        if not self.R > 0 or not self.b2 > 0 or self.b1 < 0:
            raise DomainError("need R > 0, b2 > 0, b1 >= 0")

    @property
    def plug_radius(self):
        return 2.0 * self.b1 / self.f

    @property
    def constant_forcing(self):
        return not callable(self.f)


def bingham_exact_profile(r, spec):
    """Steady velocity: integral from r to R of (f s/2 - b1)_+ / b2."""
    if callable(spec.f) or not spec.f > 0:
        raise DomainError("the steady profile needs a constant f > 0")
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(r > spec.R * (1 + 1e-12)):
        raise DomainError("r must lie in [0, R]")
    R, f, b1, b2 = spec.R, spec.f, spec.b1, spec.b2
    r0 = 2.0 * b1 / f
    if r0 >= R:
        return np.zeros_like(r)
    s = np.maximum(r, r0)
    return (f * (R * R - s * s) / 4.0 - b1 * (R - s)) / b2


def bingham_problem(spec, eps, h, T, mode="surrogate"):
    grid = Grid.disk(spec.R, h)
    density = MollifiedDensity(DensityParams(2.0, spec.b1, spec.b2), eps, mode=mode)
    return ProblemSpec(grid, density, T, forcing=spec.f, u_star=0.0, name="bingham")


def stationary_residual(problem, u, t):
    """RMS nodal residual of -div grad E(grad u) - f at time t."""
    disc = Discretization(problem.grid)
    x_u, x_k = disc.split(u)
    f = disc.split(problem.forcing_at(t))[0]
    ctx = StepContext(disc, problem.density, 0.0, x_u, f, disc.split(problem.boundary_at(t))[1])
    r, _ = _residual_and_matrix(ctx, x_u, want_matrix=False)
    return residual_norm(ctx, r)


def radial_anisotropy(grid, u, center=(0.0, 0.0)):
    """Angular over radial variance of u (rings of width h).

    Within each ring the part of u linear in r is removed first, so a purely
    radial profile scores zero up to its curvature across one ring.
    """
    X, Y = grid.coords()
    r = np.hypot(X - center[0], Y - center[1])[grid.interior]
    v = u[grid.interior]
    ring = np.floor(r / grid.h).astype(int)
    n = np.bincount(ring).astype(float)
    keep = n > 0
    nk = np.where(keep, n, 1.0)
    r_mean = np.bincount(ring, r) / nk
    v_mean = np.bincount(ring, v) / nk
    dr = r - r_mean[ring]
    dv = v - v_mean[ring]
    srr = np.bincount(ring, dr * dr)
    srv = np.bincount(ring, dr * dv)
    slope = np.divide(srv, srr, out=np.zeros_like(srv), where=srr > 0)
    resid = dv - slope[ring] * dr
    within = np.sum(resid * resid) / v.size
    between = np.sum(n[keep] * (v_mean[keep] - v.mean()) ** 2) / v.size
    return float(within / between) if between > 0 else 0.0


@dataclass
class BinghamResult:
    result: object
    problem: ProblemSpec
    exact: np.ndarray
    rel_linf: float
    plug_estimate: float
    plug_exact: float
    plug_delta: float
    steady_residual: float
    anisotropy: float

    @property
    def final(self):
        return self.result.slab.values[-1]


def run_bingham(spec, eps, h, cfg, T_max=50.0, steady_tol=1e-8, plug_delta=0.01, mode="surrogate"):
    """March from rest to a steady state and compare against the exact profile.

    Stops once max|u^{m+1} - u^m| / dt < steady_tol.  The plug estimate is
    the radius of the fully covered central part of {V <= plug_delta}.
    """
    if not spec.constant_forcing:
        raise DomainError("steady comparison needs constant forcing; use bingham_problem and run")
    n_max = int(round(T_max / cfg.dt))
    problem = bingham_problem(spec, eps, h, n_max * cfg.dt, mode)
    res = run(problem, cfg, steady_tol=steady_tol)
    if not res.stopped_early:
        raise SolverError(f"no steady state within T = {T_max}")
    g = problem.grid
    X, Y = g.coords()
    r = np.minimum(np.hypot(X, Y), spec.R)
    exact = bingham_exact_profile(r, spec)
    u = res.slab.values[-1]
    scale = np.max(np.abs(exact[g.interior]))
    rel = float(np.max(np.abs(u - exact)[g.interior]) / scale) if scale > 0 else float(np.max(np.abs(u)))
    fm = facet_mask(ScalarField(g, u), plug_delta, eps)
    return BinghamResult(
        res,
        problem,
        exact,
        rel,
        plug_radius(fm, g),
        spec.plug_radius,
        plug_delta,
        stationary_residual(problem, u, res.slab.times[-1]),
        radial_anisotropy(g, u),
    )


# ---------------------------------------------------------------------------
# crystal surface relaxation


def discrete_energy(grid, density, u):
    """h^2/4 sum over corner triangles of E(grad u), the density part of the step functional."""
    disc = Discretization(grid)
    x_u, x_k = disc.split(u)
    return disc.energy_sum(density, x_u, disc.known_part(x_k))


@dataclass
class SpohnResult:
    result: object
    problem: ProblemSpec
    facet_areas: np.ndarray
    energies: np.ndarray


def cone(grid, slope=1.0, center=(0.0, 0.0)):
    X, Y = grid.coords()
    return slope * (1.0 - np.hypot(X - center[0], Y - center[1]))


def run_spohn(cfg, mobility=1.0, eps=0.05, n=64, T=0.05, delta=0.1, initial="cone"):
    """Constant-mobility crystal relaxation: p = 3 with b1 = b3 = mobility on [-1, 1]^2.

    The boundary keeps the initial heights.  Returns the solve result with the
    area of the facet component at the centre and the discrete energy per slice.
    """
    grid = Grid.rectangle(n + 1, n + 1, 2.0 / n, origin=(-1.0, -1.0))
    density = MollifiedDensity(DensityParams(3.0, mobility, mobility), eps)
    if initial == "cone":
        h0 = cone(grid)
    elif initial == "zero":
        h0 = np.zeros(grid.shape)
    else:
        raise DomainError(f"unknown initial datum {initial!r}")
    problem = ProblemSpec(grid, density, T, forcing=0.0, u_star=h0, name="spohn")
    res = run(problem, cfg)
    mid = (n // 2, n // 2)
    areas, energies = [], []
    for m in range(len(res.slab)):
        u = res.slab.values[m]
        fm = facet_mask(ScalarField(grid, u), delta, eps)
        lab = fm.component_at(mid)
        areas.append(fm.areas[lab - 1] if lab > 0 else 0.0)
        energies.append(discrete_energy(grid, density, u))
    return SpohnResult(res, problem, np.array(areas), np.array(energies))


# ---------------------------------------------------------------------------
# manufactured solutions

FAMILIES = ("separable-heat", "smooth-bump", "traveling-ramp")


def _d1(fn, x, k):
    # fourth-order central first derivative
    return (fn(x - 2 * k) - 8 * fn(x - k) + 8 * fn(x + k) - fn(x + 2 * k)) / (12 * k)


def manufactured_forcing(u_star, density, k=1e-3):
    """f = d_t u* - div grad E(grad u*) by fourth-order differences of the analytic u*."""

    def grad(x, y, t):
        gx = _d1(lambda s: u_star(s, y, t), x, k)
        gy = _d1(lambda s: u_star(x, s, t), y, k)
        return np.stack([gx, gy], axis=-1)

    def flux(x, y, t):
        return density.grad(grad(x, y, t))

    def f(x, y, t):
        dt = _d1(lambda s: u_star(x, y, s), t, k)
        div = _d1(lambda s: flux(s, y, t)[..., 0], x, k) + _d1(lambda s: flux(x, s, t)[..., 1], y, k)
        return dt - div

    return f


@dataclass
class ManufacturedCase:
    family: str
    problem: ProblemSpec
    oracle: Callable
    params: dict = field(default_factory=dict)


def manufactured_case(family, n=32, T=0.1, eps=None, p=None, b1=None, bp=1.0):
    """Problem on the unit square whose exact solution is a known u*.

    Families: ``separable-heat`` (b1 = 0, p = 2, eps = 0 heat eigenmode, f = 0),
    ``smooth-bump`` (decaying Gaussian, p = 3) and ``traveling-ramp``
    (a smoothed ramp whose slope sweeps across small values).
    """
    grid = Grid.unit_square(n)
    X, Y = grid.coords()
    if family == "separable-heat":
        p, b1, eps = 2.0, 0.0, 0.0

        def u_star(x, y, t):
            return np.exp(-2 * np.pi**2 * t) * np.sin(np.pi * x) * np.sin(np.pi * y)

    elif family == "smooth-bump":
        p = 3.0 if p is None else p
        b1 = 0.5 if b1 is None else b1
        eps = 0.1 if eps is None else eps

        def u_star(x, y, t):
            return np.exp(-t) * np.exp(-4.0 * ((x - 0.5) ** 2 + (y - 0.5) ** 2))

    elif family == "traveling-ramp":
        p = 2.0 if p is None else p
        b1 = 0.5 if b1 is None else b1
        eps = 0.05 if eps is None else eps
        w, slope, c = 0.08, 0.6, 1.0

        def u_star(x, y, t):
            s = (x - 0.3 - c * t) / w
            return slope * w * np.logaddexp(0.0, s) + 0.1 * y

    else:
        raise DomainError(f"unknown family {family!r}; choose from {FAMILIES}")
    density = MollifiedDensity(DensityParams(p, b1, bp), eps)
    if family == "separable-heat":
        forcing = 0.0
    else:
        fx = manufactured_forcing(u_star, density)
        forcing = lambda t: fx(X, Y, t)  # noqa: E731
    oracle = lambda t: u_star(X, Y, t)  # noqa: E731
    problem = ProblemSpec(grid, density, T, forcing=forcing, u_star=oracle, name=family)
    return ManufacturedCase(family, problem, oracle, {"p": p, "b1": b1, "bp": bp, "eps": eps})


def oracle_errors(case, slab):
    """(max over slices of the L2 error, final-slice L2 error, final-slice max error)."""
    g = case.problem.grid
    h2 = g.h**2
    l2 = []
    for m, t in enumerate(slab.times):
        e = (slab.values[m] - case.oracle(t))[g.interior]
        l2.append(math.sqrt(h2 * float(np.sum(e * e))))
    e = (slab.values[-1] - case.oracle(slab.times[-1]))[g.interior]
    return max(l2), l2[-1], float(np.max(np.abs(e)))


def observed_order(errors, ratio=2.0):
    e = np.asarray(errors, dtype=float)
    return np.log(e[:-1] / e[1:]) / math.log(ratio)


# ---------------------------------------------------------------------------
# regularization sweep


@dataclass
class SweepResult:
    eps: tuple
    delta: float
    p: float
    lp_dist: dict
    sup_trunc_dist: dict
    cauchy_lp: bool
    cauchy_sup: bool
    records: dict = field(default_factory=dict)
    final_lp_dist: dict = field(default_factory=dict)

    def successive(self, table):
        return [table[(a, b)] for a, b in zip(self.eps, self.eps[1:])]

    def rows(self):
        return [(a, b, self.lp_dist[(a, b)], self.sup_trunc_dist[(a, b)]) for (a, b) in sorted(self.lp_dist, key=lambda k: (-k[0], -k[1]))]


def _sweep_member(args):
    builder, eps, cfg = args
    problem = builder(eps)
    res = run(problem, cfg)
    return res.slab.values, res.slab.times, res.newton_iterations


def _strictly_decreasing(seq):
    return all(b < a for a, b in zip(seq, seq[1:]))


def epsilon_sweep(builder, eps_list, cfg, delta, p=2.0, workers=1):
    """Run ``builder(eps)`` for each eps and compare the members pairwise.

    ``builder`` maps eps to a ProblemSpec; all members must share grid and
    time partition.  Distances are the discrete L^p(Omega_T) norm of the
    gradient difference (weights h^2 dt over interior nodes and steps) and the
    sup of the difference of G_{2 delta, eps}(grad u).  The comparison runs
    over the whole slab; the final-slice L^p(Omega) distance is kept
    alongside so its share can be inspected.
    """
    eps_list = tuple(float(e) for e in eps_list)
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise DomainError("eps list must be strictly decreasing")
    bad = [e for e in eps_list if not 0 < e < delta / 8]
    if bad:
        raise DomainError(f"each eps must satisfy 0 < eps < delta/8 = {delta / 8}; offending {bad}")
    jobs = [(builder, e, cfg) for e in eps_list]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(_sweep_member, jobs))
    else:
        outs = [_sweep_member(j) for j in jobs]
    grid = builder(eps_list[0]).grid if eps_list else None
    grads, truncs = [], []
    for e, (values, times, _) in zip(eps_list, outs):
        if not np.array_equal(times, outs[0][1]):
            raise DomainError("sweep members must share the time partition")
        gr = np.stack([_interior_gradients(grid, v) for v in values[1:]])
        grads.append(gr)
        truncs.append(g_delta_eps(gr, 2 * delta, e))
    w = grid.h**2 * cfg.dt if eps_list else 0.0
    lp, sup, final = {}, {}, {}
    for i in range(len(eps_list)):
        for j in range(i + 1, len(eps_list)):
            d = np.linalg.norm(grads[i] - grads[j], axis=-1)
            lp[(eps_list[i], eps_list[j])] = float((w * np.sum(d**p)) ** (1.0 / p))
            final[(eps_list[i], eps_list[j])] = float((grid.h**2 * np.sum(d[-1] ** p)) ** (1.0 / p))
            sup[(eps_list[i], eps_list[j])] = float(np.max(np.linalg.norm(truncs[i] - truncs[j], axis=-1)))
    res = SweepResult(eps_list, delta, p, lp, sup, False, False, final_lp_dist=final)
    res.cauchy_lp = _strictly_decreasing(res.successive(lp))
    res.cauchy_sup = _strictly_decreasing(res.successive(sup))
    res.records = {e: out[2] for e, out in zip(eps_list, outs)}
    return res


def _interior_gradients(grid, u):
    return nodal_gradient(ScalarField(grid, u))[grid.interior]


def bingham_builder(spec, h, T, mode="surrogate"):
    """Picklable eps -> ProblemSpec map for sweeps."""
    return _BinghamBuilder(spec, h, T, mode)


@dataclass(frozen=True)
class _BinghamBuilder:
    spec: BinghamPipeSpec
    h: float
    T: float
    mode: str

    def __call__(self, eps):
        return bingham_problem(self.spec, eps, self.h, self.T, self.mode)
