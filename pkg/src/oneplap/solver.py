"""Implicit time stepping of the regularized flow as convex minimization.

Each step minimizes

    J(u) = h^2 sum_nodes [a/2 (u - u_hat)^2 - f u] + h^2/4 sum_triangles E(grad u)

over the interior nodal values, where ``a = 1/dt`` and ``u_hat = u_old`` for
backward Euler (``a = 3/(2 dt)``, ``u_hat = (4 u_old - u_older)/3`` for BDF2).
Every grid cell contributes its four corner triangles, i.e. the average of
the two diagonal P1 triangulations; for a quadratic density this is exactly
the 5-point Laplacian.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .energy import QuadraticDensity
from .grid import BOUNDARY, EXTERIOR, INTERIOR, Grid, TimeSlab, cylinder_nodes

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class LinearSolveError(SolverError):
    def __init__(self, rel_residual):
        super().__init__(f"linear solve stagnated at relative residual {rel_residual:.3e}")
        self.rel_residual = rel_residual


class LineSearchError(SolverError):
    def __init__(self, J0, J_last):
        super().__init__(f"line search exhausted: J(u)={J0!r}, last trial J={J_last!r}")
        self.J0 = J0
        self.J_last = J_last


class StepFailure(SolverError):
    def __init__(self, step, t, cause):
        super().__init__(f"step {step} (t={t:.6g}) failed: {cause}")
        self.step = step
        self.t = t
        self.cause = cause


@dataclass
class StepperConfig:
    dt: float
    newton_tol: float = 1e-9
    newton_max: int = 100
    linear_tol: float = 1e-10
    damping: float = 0.5
    scheme: str = "euler"
    linear_solver: str = "direct"

    def __post_init__(self):
        for name in ("dt", "newton_tol", "newton_max", "linear_tol", "damping"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.damping < 1:
            raise ValueError("damping must lie in (0, 1)")
        if self.scheme not in ("euler", "bdf2"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.linear_solver not in ("direct", "cg"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")


def _as_time_function(value, grid):
    """Normalize constant / f(t) / nodal array data to a callable returning a nodal array."""
    if callable(value):
        def fn(t):
            out = value(t)
            return np.broadcast_to(np.asarray(out, dtype=float), grid.shape)
        return fn
    arr = np.broadcast_to(np.asarray(value, dtype=float), grid.shape)
    return lambda t: arr


@dataclass
class ProblemSpec:
    """Dirichlet problem  d_t u - div grad E(grad u) = f  on a masked grid.

    ``forcing`` and ``u_star`` accept a constant, a nodal array, or a callable
    of time returning either.  ``u_star`` supplies the initial field at t = 0
    and the boundary values at every step.
    """

    grid: Grid
    density: object
    T: float
    forcing: object = 0.0
    u_star: object = 0.0
    initial: object = None
    name: str = "problem"

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        self.forcing_at = _as_time_function(self.forcing, self.grid)
        self.boundary_at = _as_time_function(self.u_star, self.grid)
        if self.initial is None:
            self.initial_field = np.array(self.boundary_at(0.0), dtype=float)
        else:
            self.initial_field = np.array(np.broadcast_to(self.initial, self.grid.shape), dtype=float)
        if not np.all(np.isfinite(self.forcing_at(0.0))):
            raise ValueError("forcing must be finite")


class Discretization:
    """Triangle difference operators of a grid, split into unknown/known columns."""

    def __init__(self, grid):
        self.grid = grid
        nx, ny = grid.shape
        mask = grid.mask
        idx = np.arange(nx * ny).reshape(nx, ny)
        a = idx[:-1, :-1]
        b = idx[1:, :-1]
        c = idx[:-1, 1:]
        d = idx[1:, 1:]
        corners = np.stack([mask[:-1, :-1], mask[1:, :-1], mask[:-1, 1:], mask[1:, 1:]])
        keep = np.all(corners != EXTERIOR, axis=0) & np.any(corners == INTERIOR, axis=0)
        a, b, c, d = (x[keep] for x in (a, b, c, d))
        nc = a.size
        self.n_cells = nc
        h = grid.h
        # triangle k: (x-difference edge, y-difference edge)
        xe = [(a, b), (a, b), (c, d), (c, d)]
        ye = [(a, c), (b, d), (a, c), (b, d)]
        rows = np.arange(4 * nc)

        def op(pairs):
            lo = np.concatenate([p[0] for p in pairs])
            hi = np.concatenate([p[1] for p in pairs])
            data = np.concatenate([np.full(lo.size, -1.0 / h), np.full(hi.size, 1.0 / h)])
            return sp.csr_matrix(
                (data, (np.concatenate([rows, rows]), np.concatenate([lo, hi]))),
                shape=(4 * nc, nx * ny),
            )

        Gx, Gy = op(xe), op(ye)
        flat = mask.ravel()
        self.unknown = np.flatnonzero(flat == INTERIOR)
        self.known = np.flatnonzero(flat != INTERIOR)
        self.Gx_u = Gx[:, self.unknown].tocsr()
        self.Gy_u = Gy[:, self.unknown].tocsr()
        self.Gx_k = Gx[:, self.known].tocsr()
        self.Gy_k = Gy[:, self.known].tocsr()
        self.GxT = self.Gx_u.T.tocsr()
        self.GyT = self.Gy_u.T.tocsr()
        self.weight = h * h / 4.0
        self.h2 = h * h

    @property
    def n_unknowns(self):
        return self.unknown.size

    def split(self, full):
        f = full.ravel()
        return f[self.unknown].copy(), f[self.known].copy()

    def join(self, x_u, x_k):
        out = np.empty(self.grid.nx * self.grid.ny)
        out[self.unknown] = x_u
        out[self.known] = x_k
        return out.reshape(self.grid.shape)

    def triangle_gradients(self, x_u, known_part):
        gx = self.Gx_u @ x_u + known_part[0]
        gy = self.Gy_u @ x_u + known_part[1]
        return np.stack([gx, gy], axis=-1)

    def known_part(self, x_k):
        return self.Gx_k @ x_k, self.Gy_k @ x_k

    def stiffness(self, hxx, hxy, hyy):
        w = self.weight
        Dxx = sp.diags(w * hxx)
        Dxy = sp.diags(w * hxy)
        Dyy = sp.diags(w * hyy)
        K = self.GxT @ (Dxx @ self.Gx_u) + self.GyT @ (Dyy @ self.Gy_u)
        cross = self.GxT @ (Dxy @ self.Gy_u)
        return (K + cross + cross.T).tocsr()

    def energy_sum(self, density, x_u, kp):
        return self.weight * float(np.sum(density.eval(self.triangle_gradients(x_u, kp))))


@dataclass
class StepContext:
    """Everything a single implicit step needs besides the current iterate."""

    disc: Discretization
    density: object
    mass: float
    u_hat: np.ndarray
    forcing: np.ndarray
    known: np.ndarray
    kp: tuple = None

    def __post_init__(self):
        if self.kp is None:
            self.kp = self.disc.known_part(self.known)


def incremental_energy(u_new, u_old, dt, f, density, disc=None):
    """Backward-Euler step functional J evaluated at ``u_new`` (ScalarFields).

    ``f`` is a constant or nodal array.  Only interior nodes carry the mass
    and forcing terms; the density term runs over every triangle touching an
    unknown.
    """
    grid = u_new.grid
    disc = disc or Discretization(grid)
    ctx = StepContext(
        disc,
        density,
        1.0 / dt,
        disc.split(u_old.values)[0],
        disc.split(np.broadcast_to(np.asarray(f, dtype=float), grid.shape))[0],
        disc.split(u_new.values)[1],
    )
    return _energy(ctx, disc.split(u_new.values)[0])


def _energy(ctx, x):
    d = ctx.disc
    diff = x - ctx.u_hat
    return d.h2 * float(np.sum(0.5 * ctx.mass * diff * diff - ctx.forcing * x)) + d.energy_sum(
        ctx.density, x, ctx.kp
    )


def _energy_scale(ctx, x):
    d = ctx.disc
    diff = x - ctx.u_hat
    e = d.weight * float(np.sum(np.abs(ctx.density.eval(d.triangle_gradients(x, ctx.kp)))))
    return d.h2 * float(np.sum(0.5 * ctx.mass * diff * diff + np.abs(ctx.forcing * x))) + e


def _residual_and_matrix(ctx, x, want_matrix=True):
    d = ctx.disc
    g = d.triangle_gradients(x, ctx.kp)
    fx, fy, hxx, hxy, hyy = ctx.density.flux_and_hess(g)
    r = d.h2 * (ctx.mass * (x - ctx.u_hat) - ctx.forcing) + d.weight * (d.GxT @ fx + d.GyT @ fy)
    if not want_matrix:
        return r, None
    K = d.stiffness(hxx, hxy, hyy) + sp.identity(x.size, format="csr") * (d.h2 * ctx.mass)
    return r, K


def residual_norm(ctx, r):
    """RMS of the nodal residual per unit area."""
    return float(np.linalg.norm(r) / (ctx.disc.h2 * math.sqrt(max(r.size, 1))))


def _backward_error(K, x, b, resid):
    # normwise backward error; the attainable floor for an ill-conditioned K
    scale = spla.norm(K, np.inf) * np.max(np.abs(x)) + np.max(np.abs(b))
    return float(np.max(np.abs(resid)) / scale) if scale > 0 else 0.0


def _solve_spd(K, rhs, cfg):
    """SPD solve to relative residual ``linear_tol``.

    The direct path refines iteratively; when conditioning caps the relative
    residual it accepts a backward error at round-off level instead.
    """
    nb = np.linalg.norm(rhs)
    if nb == 0:
        return np.zeros_like(rhs)
    if cfg.linear_solver == "direct":
        # minimum-degree ordering on K + K^T suits the symmetric 9-point pattern
        lu = spla.splu(
            K.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True}
        )
        sol = lu.solve(rhs)
        resid = K @ sol - rhs
        for _ in range(3):
            if np.linalg.norm(resid) <= cfg.linear_tol * nb:
                break
            sol = sol - lu.solve(resid)
            resid = K @ sol - rhs
    else:
        M = sp.diags(1.0 / K.diagonal())
        sol, _ = spla.cg(K, rhs, rtol=cfg.linear_tol, atol=0.0, M=M, maxiter=20 * rhs.size)
        resid = K @ sol - rhs
    rel = float(np.linalg.norm(resid) / nb)
    if not np.isfinite(rel):
        raise LinearSolveError(rel)
    if rel > cfg.linear_tol and _backward_error(K, sol, rhs, resid) > 1e3 * np.finfo(float).eps:
        raise LinearSolveError(rel)
    return sol


def residual_floor(ctx, x, K):
    """Residual norm attainable in floating point at ``x``.

    The nodal residual is a sum of terms of size ``|K||x|``; its rounding
    error, rescaled like the residual itself, bounds what any iteration can
    reach.  Stiff plug regions at small eps push it above typical tolerances.
    """
    d = ctx.disc
    scale = abs(K) @ np.abs(x) + d.h2 * (ctx.mass * np.abs(ctx.u_hat) + np.abs(ctx.forcing))
    return residual_norm(ctx, np.finfo(float).eps * scale)


def newton_step(x, ctx, cfg, linearization=None):
    """One damped Newton iteration on J.

    Returns ``(x_next, residual_norm_at_x, J_next)``.  The step is accepted
    when J satisfies an Armijo decrease, or, once J differences fall to
    round-off level, when the residual decreases instead.
    """
    r, K = linearization or _residual_and_matrix(ctx, x)
    res = residual_norm(ctx, r)
    d = _solve_spd(K, -r, cfg)
    J0 = _energy(ctx, x)
    floor = 64 * np.finfo(float).eps * _energy_scale(ctx, x)
    slope = float(r @ d)
    t = 1.0
    J1 = J0
    while t > 1e-12:
        trial = x + t * d
        J1 = _energy(ctx, trial)
        if J1 <= J0 + 1e-4 * t * slope and J1 < J0:
            return trial, res, J1
        if abs(J1 - J0) <= floor:
            r1, _ = _residual_and_matrix(ctx, trial, want_matrix=False)
            if residual_norm(ctx, r1) < res:
                return trial, res, J1
        t *= cfg.damping
    raise LineSearchError(J0, J1)


@dataclass
class StepRecord:
    step: int
    t: float
    newton_iters: int
    J: float
    residual: float
    J_history: list = field(default_factory=list)

    def log_line(self):
        return f"{self.step},{self.t:.17g},{self.newton_iters},{self.J:.17g},{self.residual:.17g}"


def solve_step(ctx, x0, cfg):
    """Minimize J from ``x0``; returns (x, iterations, J, final residual, J history)."""
    x = x0
    history = [_energy(ctx, x)]
    for it in range(cfg.newton_max + 1):
        r, K = _residual_and_matrix(ctx, x)
        res = residual_norm(ctx, r)
        if res <= cfg.newton_tol or res <= residual_floor(ctx, x, K):
            return x, it, history[-1], res, history
        if it == cfg.newton_max:
            break
        x, _, J = newton_step(x, ctx, cfg, (r, K))
        history.append(J)
    raise SolverError(f"Newton did not converge in {cfg.newton_max} iterations (residual {res:.3e})")


@dataclass
class SolveResult:
    slab: TimeSlab
    records: list
    converged: bool = True
    stopped_early: bool = False

    @property
    def newton_iterations(self):
        return [r.newton_iters for r in self.records]

    @property
    def energies(self):
        return [r.J for r in self.records]

    def log_lines(self):
        return ["step,t,newton_iters,J,residual"] + [r.log_line() for r in self.records]


def _stepper(problem, cfg, disc, u0, t0, n_steps, steady_tol=None):
    """Yield (step, t, u) after each implicit step starting from ``u0`` at ``t0``."""
    density = problem.density
    prev = None
    cur = disc.split(u0)[0]
    for m in range(1, n_steps + 1):
        t = t0 + m * cfg.dt
        known = disc.split(problem.boundary_at(t))[1]
        f = disc.split(problem.forcing_at(t))[0]
        if cfg.scheme == "bdf2" and prev is not None:
            mass, u_hat = 1.5 / cfg.dt, (4.0 * cur - prev) / 3.0
        else:
            mass, u_hat = 1.0 / cfg.dt, cur
        ctx = StepContext(disc, density, mass, u_hat, f, known)
        try:
            x, iters, J, res, hist = solve_step(ctx, cur.copy(), cfg)
        except SolverError as exc:
            raise StepFailure(m, t, exc) from exc
        if not np.all(np.isfinite(x)):
            raise StepFailure(m, t, "non-finite iterate")
        rec = StepRecord(m, t, iters, J, res, hist)
        log.debug(rec.log_line())
        prev, cur = cur, x
        yield rec, disc.join(x, known), (None if prev is None else float(np.max(np.abs(x - prev))))


def run(problem, cfg, steady_tol=None, max_steps=None):
    """March from t = 0 to ``problem.T`` (or until steady).

    With ``steady_tol`` the march stops once ``max|u^{m+1} - u^m| / dt``
    drops below it; ``max_steps`` caps the step count in that mode.
    """
    grid = problem.grid
    disc = Discretization(grid)
    n_steps = int(round(problem.T / cfg.dt))
    if n_steps < 1 or abs(n_steps * cfg.dt - problem.T) > 1e-9 * problem.T:
        raise ValueError("T must be a positive integer multiple of dt")
    if max_steps is not None:
        n_steps = max_steps
    u0 = np.array(problem.initial_field, dtype=float)
    mask = grid.mask != INTERIOR
    u0[mask] = problem.boundary_at(0.0)[mask]
    slices = [u0]
    records = []
    stopped = False
    for rec, u, change in _stepper(problem, cfg, disc, u0, 0.0, n_steps):
        records.append(rec)
        slices.append(u)
        if steady_tol is not None and change is not None and change / cfg.dt < steady_tol:
            stopped = True
            break
    times = cfg.dt * np.arange(len(slices))
    return SolveResult(TimeSlab(grid, times, np.stack(slices)), records, True, stopped)


def continue_run(problem, cfg, u_start, t_start, n_steps):
    """Further steps from a given state; returns a SolveResult whose slab starts at ``t_start``."""
    disc = Discretization(problem.grid)
    slices = [np.array(u_start, dtype=float)]
    records = []
    for rec, u, _ in _stepper(problem, cfg, disc, slices[0], t_start, n_steps):
        records.append(rec)
        slices.append(u)
    times = t_start + cfg.dt * np.arange(len(slices))
    return SolveResult(TimeSlab(problem.grid, times, np.stack(slices)), records)


def steady_window(problem, cfg, u_start, t_start, n_slices, max_settle=20, drift_tol=1e-8):
    """Slab of ``n_slices`` steps of a converged state with time-constant data.

    Steps continue from ``u_start`` until Newton accepts the state without
    iterating, or the drift rate max|u^{m+1} - u^m| / dt falls below
    ``drift_tol``.  The state is then frozen: every slice is the same array,
    stored once as a broadcast view, and the slab misrepresents the true
    evolution by at most ``drift_tol`` times the window length.
    """
    disc = Discretization(problem.grid)
    u = np.array(u_start, dtype=float)
    t = t_start
    for rec, u_next, change in _stepper(problem, cfg, disc, u, t_start, max_settle):
        u, t = u_next, rec.t
        if rec.newton_iters == 0 or (change is not None and change / cfg.dt < drift_tol):
            break
    else:
        raise SolverError(f"state did not settle within {max_settle} steps")
    t_end = t + (n_slices - 1) * cfg.dt
    for fn in (problem.boundary_at, problem.forcing_at):
        if not np.array_equal(fn(t), fn(t_end)):
            raise ValueError("steady window needs time-constant boundary data and forcing")
    times = t + cfg.dt * np.arange(n_slices)
    return TimeSlab(problem.grid, times, np.broadcast_to(u, (n_slices,) + u.shape))


# ---------------------------------------------------------------------------
# frozen-coefficient heat flow on a sub-cylinder


class DegenerateAverage(SolverError):
    def __init__(self, measured, required):
        super().__init__(f"|mean grad u| = {measured:.6g} below the required {required:.6g}")
        self.measured = measured
        self.required = required


def local_disk_grid(parent, center, radius):
    """Sub-grid of ``parent`` whose unknowns are parent-interior nodes in B_radius(center)."""
    h = parent.h
    X, Y = parent.coords()
    inner = (np.hypot(X - center[0], Y - center[1]) < radius) & parent.interior
    if not inner.any():
        raise ValueError("local disk holds no interior node")
    ii, jj = np.nonzero(inner)
    i0, i1 = ii.min() - 1, ii.max() + 2
    j0, j1 = jj.min() - 1, jj.max() + 2
    if i0 < 0 or j0 < 0 or i1 > parent.nx or j1 > parent.ny:
        raise ValueError("local disk touches the edge of the parent grid")
    sub = inner[i0:i1, j0:j1]
    near = np.zeros_like(sub)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            near |= np.roll(np.roll(sub, di, 0), dj, 1)
    mask = np.full(sub.shape, EXTERIOR, dtype=np.int8)
    mask[near] = BOUNDARY
    mask[sub] = INTERIOR
    origin = (parent.origin[0] + i0 * h, parent.origin[1] + j0 * h)
    g = Grid(sub.shape[0], sub.shape[1], h, origin, mask, "disk", float(radius), tuple(center))
    return g, (slice(i0, i1), slice(j0, j1))


@dataclass
class FrozenFlow:
    slab: TimeSlab
    window: tuple
    A: np.ndarray
    mean_gradient: np.ndarray
    records: list


def solve_frozen_heat_flow(slab, Q, density, delta, mu, cfg=None):
    """Constant-coefficient flow on Q_{rho/2} with A = hess E(mean grad u over Q_rho).

    ``v`` starts from ``u`` at the first slab time in the half cylinder and
    takes ``u``'s values on the lateral boundary at every later slice.
    """
    grads = slab.nodal_gradients()
    nodes = cylinder_nodes(slab, Q)
    mean = grads[nodes.slices[:, None], nodes.ii, nodes.jj].reshape(-1, 2).mean(axis=0)
    required = delta + mu / 4.0
    if np.hypot(*mean) < required:
        raise DegenerateAverage(float(np.hypot(*mean)), required)
    A = np.asarray(density.hess(mean), dtype=float)
    half = Q.scaled(0.5)
    local, window = local_disk_grid(slab.grid, Q.center, half.r)
    t = slab.times
    tol = 1e-12 * max(1.0, abs(Q.t0))
    start = np.flatnonzero(t <= half.t0 - half.r**2 + tol)
    m0 = start[-1] if start.size else np.flatnonzero(t > half.t0 - half.r**2)[0]
    m1 = int(np.flatnonzero(t <= half.t0 + tol)[-1])
    if m1 <= m0:
        raise ValueError("half cylinder spans no time step")
    sub = slab.values[:, window[0], window[1]]

    def boundary(time):
        m = int(round((time - t[0]) / slab.dt))
        return sub[m]

    qd = QuadraticDensity(A)
    problem = ProblemSpec(local, qd, T=t[m1] - t[m0], forcing=0.0, u_star=boundary, initial=sub[m0])
    step_cfg = cfg or StepperConfig(dt=slab.dt, newton_tol=1e-11, newton_max=5)
    if step_cfg.dt != slab.dt:
        raise ValueError("frozen flow must use the slab time step")
    res = continue_run(problem, step_cfg, sub[m0], t[m0], m1 - m0)
    return FrozenFlow(res.slab, window, A, mean, res.records)
