"""Regularity diagnostics over parabolic cylinders of a computed slab.

Gradients are nodal central differences of each slice.  Every statistic is
an aggregate over the (node, slice) samples of a cylinder, so it does not
depend on enumeration order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import (
    DomainError,
    ParabolicCylinder,
    ScalarField,
    cylinder_nodes,
    fits_in,
    nodal_gradient,
)
from .truncation import g_delta_eps, modulus

FLAT_TOL = 1e-14


class WrongBranch(DomainError):
    pass


# ---------------------------------------------------------------------------
# pointwise fields


def _per_slice(fn, grads):
    # a steady slab stores one broadcast slice; keep derived fields broadcast too
    if grads.strides[0] == 0:
        one = fn(grads[0])
        return np.broadcast_to(one, (grads.shape[0],) + one.shape)
    return fn(grads)


def modulus_slab(slab, eps):
    """V = sqrt(eps^2 + |grad u|^2), shape (n_times, nx, ny)."""
    return _per_slice(lambda g: modulus(g, eps), slab.nodal_gradients())


def truncated_slab(slab, delta, eps):
    """G_{delta,eps}(grad u), shape (n_times, nx, ny, 2)."""
    return _per_slice(lambda g: g_delta_eps(g, delta, eps), slab.nodal_gradients())


def u_delta_eps_field(u, delta, eps):
    """(V - delta)_+^2 for one slice."""
    v = modulus(nodal_gradient(u), eps)
    return ScalarField(u.grid, np.maximum(v - delta, 0.0) ** 2)


@dataclass
class FacetMask:
    mask: np.ndarray
    labels: np.ndarray
    areas: np.ndarray
    h: float

    @property
    def n_components(self):
        return self.areas.size

    def component_at(self, index):
        return int(self.labels[index])


def facet_mask(u, delta, eps):
    """Interior nodes with V <= delta, labeled into 4-connected components.

    Boundary nodes are left out: their one-sided gradients carry no
    information about facets.
    """
    g = u.grid
    v = modulus(nodal_gradient(u), eps)
    mask = (v <= delta) & g.interior
    labels, n = ndimage.label(mask)
    counts = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return FacetMask(mask, labels, counts * g.h**2, g.h)


def plug_radius(fm, grid, center=(0.0, 0.0)):
    """Largest node radius r such that every interior node with |x - c| <= r is masked."""
    X, Y = grid.coords()
    dist = np.hypot(X - center[0], Y - center[1])
    outside = grid.interior & ~fm.mask
    if not outside.any():
        return float(dist[grid.interior].max())
    d_out = dist[outside].min()
    inside = fm.mask & (dist < d_out)
    return float(dist[inside].max()) if inside.any() else 0.0


# ---------------------------------------------------------------------------
# superlevel sets and the branch dichotomy


def _samples(slab, Q, arr, **kw):
    nodes = cylinder_nodes(slab, Q, **kw)
    return arr[nodes.slices[:, None], nodes.ii, nodes.jj]


def _require_fit(slab, Q):
    if not fits_in(slab, Q):
        raise DomainError(f"cylinder r={Q.r} at {Q.center}, t0={Q.t0} leaves the slab")


def measure_mu(slab, Q, delta, eps):
    """sup over Q_{2 rho} of (V - delta)_+."""
    big = Q.scaled(2.0)
    _require_fit(slab, big)
    v = _samples(slab, big, modulus_slab(slab, eps))
    return float(np.max(np.maximum(v - delta, 0.0)))


def superlevel_ratio(slab, Q, delta, eps, mu, nu):
    """Fraction of samples of Q with V - delta > (1 - nu) mu."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    v = _samples(slab, Q, modulus_slab(slab, eps))
    return float(np.count_nonzero(v - delta > (1.0 - nu) * mu) / v.size)


@dataclass
class CylinderStats:
    Q: ParabolicCylinder
    delta: float
    eps: float
    mu: float
    nu: float
    ratio_S: float
    branch: str
    flat: bool


def classify_branch(slab, Q, delta, eps, nu=0.125, mu=None):
    """Degenerate iff the superlevel ratio is at most 1 - nu; flat iff mu <= delta."""
    if not 0 < nu < 0.25:
        raise DomainError("nu must lie in (0, 1/4)")
    if mu is None:
        mu = measure_mu(slab, Q, delta, eps)
    _require_fit(slab, Q)
    ratio = superlevel_ratio(slab, Q, delta, eps, mu, nu) if mu > 0 else 0.0
    branch = "nondegenerate" if ratio > 1.0 - nu else "degenerate"
    return CylinderStats(Q, delta, eps, mu, nu, ratio, branch, bool(mu <= delta))


def degiorgi_sup_decay(slab, stats):
    """(sup of |G| over Q_{sqrt(nu) rho/3}, that sup / mu) on a degenerate cylinder.

    On a flat cylinder G_{2 delta,eps} vanishes on all of Q_{2 rho}, so both
    numbers are zero; otherwise G = G_{delta,eps}.
    """
    if stats.branch != "degenerate":
        raise WrongBranch("sup decay is defined on the degenerate branch only")
    if stats.flat:
        return 0.0, 0.0
    inner = stats.Q.scaled(math.sqrt(stats.nu) / 3.0)
    v = _samples(slab, inner, modulus_slab(slab, stats.eps))
    sup = float(np.max(np.maximum(v - stats.delta, 0.0)))
    return sup, sup / stats.mu


# ---------------------------------------------------------------------------
# oscillation energy


def oscillation_energy(slab, Q, xi=None):
    """Mean of |grad u - xi|^2 over Q; xi defaults to the cylinder mean (the minimizer)."""
    g = _samples(slab, Q, slab.nodal_gradients()).reshape(-1, 2)
    c = g.mean(axis=0) if xi is None else np.asarray(xi, dtype=float)
    return float(np.mean(np.sum((g - c) ** 2, axis=-1)))


@dataclass
class OscillationReport:
    center: tuple
    t0: float
    radii: np.ndarray
    phi: np.ndarray
    ratios: dict
    slope: float

    def decreasing(self):
        """Whether Phi(sigma rho)/Phi(rho) strictly decreases along the sigmas."""
        r = [self.ratios[s] for s in sorted(self.ratios, reverse=True)]
        return all(b < a for a, b in zip(r, r[1:]))


def oscillation_decay(slab, center, t0, rho, sigmas=(0.5, 0.25, 0.125)):
    radii = np.array([rho] + [s * rho for s in sigmas])
    phi = np.array([oscillation_energy(slab, ParabolicCylinder(tuple(center), t0, r)) for r in radii])
    ratios = {s: (phi[k + 1] / phi[0] if phi[0] > 0 else 0.0) for k, s in enumerate(sigmas)}
    pos = phi > 0
    slope = float(np.polyfit(np.log(radii[pos]), np.log(phi[pos]), 1)[0]) if pos.sum() >= 2 else float("nan")
    return OscillationReport(tuple(center), t0, radii, phi, ratios, slope)


# ---------------------------------------------------------------------------
# Moser-type sup bound


def moser_exponents(p, n=2, q=math.inf, sigma=3.0):
    """(d, d1, d2) with the case split at p = 2."""
    if not p > 2 * n / (n + 2):
        raise DomainError(f"p must exceed 2n/(n+2) = {2 * n / (n + 2)}")
    if q <= n + 2:
        raise DomainError(f"q must exceed n + 2 = {n + 2}")
    if p >= 2:
        d, d1 = p / 2.0, 2.0
    else:
        d, d1 = 2.0 * p / (p * (n + 2) - 2.0 * n), p / (p - 1.0)
    if n == 2:
        if not 2 < sigma < q / 2:
            raise DomainError(f"sigma must lie in (2, q/2), got {sigma}")
        d2 = 2.0 * d * sigma / p
    else:
        d2 = d * (n + 2) / p
    return d, d1, d2


def lq_norm(values, h, dt, q):
    a = np.abs(np.asarray(values, dtype=float))
    if math.isinf(q):
        return float(a.max())
    return float((h * h * dt * np.sum(a**q)) ** (1.0 / q))


@dataclass
class MoserReport:
    theta: float
    lhs: float
    rhs_core: float
    ratio: float
    d: float
    d1: float
    d2: float
    sigma: float
    q: float


def moser_report(slab, Q_R, theta, p, eps, forcing=0.0, q=math.inf, sigma=3.0):
    """sup_{Q_{theta R}} V against (1 + |f|_q^{d1} + mean V^p)^{d/p} / (1 - theta)^{d2}.

    ``forcing`` is a constant or an array shaped like the slab values.
    """
    if not 0 < theta < 1:
        raise DomainError("theta must lie in (0, 1)")
    d, d1, d2 = moser_exponents(p, 2, q, sigma)
    _require_fit(slab, Q_R)
    V = modulus_slab(slab, eps)
    lhs = float(np.max(_samples(slab, Q_R.scaled(theta), V)))
    vR = _samples(slab, Q_R, V)
    f = np.broadcast_to(np.asarray(forcing, dtype=float), slab.values.shape)
    fn = lq_norm(_samples(slab, Q_R, f), slab.grid.h, slab.dt, q)
    rhs = (1.0 + fn**d1 + float(np.mean(vR**p))) ** (d / p) / (1.0 - theta) ** d2
    return MoserReport(theta, lhs, rhs, lhs / rhs, d, d1, d2, sigma, q)


# ---------------------------------------------------------------------------
# Hoelder fit


@dataclass
class HolderEstimate:
    alpha_hat: float
    C_hat: float
    n_pairs: int
    residual: float
    d_min: float
    d_max: float
    seed: int
    flat: bool = False
    bins: np.ndarray = field(default=None, repr=False)
    envelope: np.ndarray = field(default=None, repr=False)
    pairs: np.ndarray = field(default=None, repr=False)


def _offset_set(rng, d_min, d_max, h, n_bins, per_bin):
    edges = np.geomspace(d_min, d_max, n_bins + 1)
    out = set()
    for b in range(n_bins):
        for _ in range(per_bin):
            length = math.exp(rng.uniform(math.log(edges[b]), math.log(edges[b + 1]))) / h
            angle = rng.uniform(0, math.pi)
            o = (int(round(length * math.cos(angle))), int(round(length * math.sin(angle))))
            if d_min <= h * math.hypot(*o) <= d_max:
                out.add(o)
    return sorted(out)


def holder_fit(G, slab, Q, n_offsets=64, seed=0, d_min=None, d_max=None, n_bins=8):
    """Fit |G(X1) - G(X2)| <= C d_p(X1, X2)^alpha over pairs inside Q.

    ``G`` is shaped like the slab values, optionally with a trailing vector
    axis.  Seeded lattice offsets with log-uniform length in [d_min, d_max]
    (defaults 4h and rho/4) are each paired with every admissible base
    sample, at time lag zero and at the largest lag not exceeding the
    spatial scale.  The empirical modulus of continuity (maximal oscillation
    per log-bin of d_p) is fitted by least squares in log-log.
    """
    h = slab.grid.h
    d_min = 4 * h if d_min is None else d_min
    d_max = Q.r / 4 if d_max is None else d_max
    if not d_max > d_min:
        raise DomainError(f"empty separation bracket [{d_min}, {d_max}]")
    G = np.asarray(G, dtype=float)
    if G.ndim == slab.values.ndim:
        G = G[..., None]
    nodes = cylinder_nodes(slab, Q)
    inside = np.zeros(slab.grid.shape, dtype=bool)
    inside[nodes.ii, nodes.jj] = True
    sl = nodes.slices
    rng = np.random.default_rng(seed)
    offsets = _offset_set(rng, d_min, d_max, h, n_bins, max(1, n_offsets // n_bins))
    nx, ny = slab.grid.shape
    dps, oscs = [], []
    n_pairs = 0
    for di, dj in offsets:
        dist = h * math.hypot(di, dj)
        i2, j2 = nodes.ii + di, nodes.jj + dj
        ok = (i2 >= 0) & (i2 < nx) & (j2 >= 0) & (j2 < ny)
        ok[ok] = inside[i2[ok], j2[ok]]
        if not ok.any():
            continue
        i1, j1, i2, j2 = nodes.ii[ok], nodes.jj[ok], i2[ok], j2[ok]
        kmax = int(math.floor(dist * dist / slab.dt * (1 + 1e-12))) if slab.dt > 0 else 0
        for lag in sorted({0, kmax}):
            m1 = sl[np.isin(sl - lag, sl)]
            if m1.size == 0:
                continue
            a = G[m1[:, None], i1, j1]
            b = G[(m1 - lag)[:, None], i2, j2]
            osc = np.linalg.norm(a - b, axis=-1)
            n_pairs += osc.size
            dps.append(max(dist, math.sqrt(lag * slab.dt)))
            oscs.append(float(osc.max()))
    dps, oscs = np.array(dps), np.array(oscs)
    if n_pairs < 100:
        raise DomainError(f"only {n_pairs} pairs fit inside the cylinder")
    if np.max(oscs) < FLAT_TOL:
        return HolderEstimate(float("nan"), float("nan"), n_pairs, float("nan"), d_min, d_max, seed, True)
    edges = np.geomspace(d_min, d_max * (1 + 1e-12), n_bins + 1)
    which = np.clip(np.searchsorted(edges, dps, side="right") - 1, 0, n_bins - 1)
    centers, env = [], []
    for b in range(n_bins):
        sel = which == b
        if sel.any() and oscs[sel].max() >= FLAT_TOL:
            centers.append(math.sqrt(edges[b] * edges[b + 1]))
            env.append(oscs[sel].max())
    if len(centers) < 2:
        return HolderEstimate(float("nan"), float("nan"), n_pairs, float("nan"), d_min, d_max, seed, True)
    lx, ly = np.log(centers), np.log(env)
    coef = np.polyfit(lx, ly, 1)
    resid = float(np.sqrt(np.mean((np.polyval(coef, lx) - ly) ** 2)))
    return HolderEstimate(
        float(coef[0]), float(math.exp(coef[1])), n_pairs, resid, d_min, d_max, seed, False,
        np.array(centers), np.array(env), np.column_stack([dps, oscs]),
    )


# ---------------------------------------------------------------------------
# subgradient witness


@dataclass
class WitnessReport:
    Z: np.ndarray
    max_ratio: float
    max_misalignment: float
    alignment_c: float
    n_aligned: int


def subgradient_witness(u, density, delta):
    """Z = grad E_{1,eps}(grad u) at the active nodes of one slice.

    ``alignment_c`` is the smallest c with
    <Z, grad u> >= (1 - c eps^2/delta^2) b1 |grad u| on {V > 2 delta}.
    """
    b1 = density.params.b1
    if not b1 > 0:
        raise DomainError("the witness needs b1 > 0")
    eps = density.eps
    g = nodal_gradient(u)[u.grid.active]
    Z = density.grad(g, density.one_terms)
    r = np.hypot(g[:, 0], g[:, 1])
    max_ratio = float(np.max(np.hypot(Z[:, 0], Z[:, 1])) / b1)
    sel = np.sqrt(eps * eps + r * r) > 2 * delta
    if sel.any() and eps > 0:
        unit = g[sel] / r[sel, None]
        mis = float(np.max(np.hypot(*(Z[sel] - b1 * unit).T)))
        defect = 1.0 - np.sum(Z[sel] * g[sel], axis=-1) / (b1 * r[sel])
        c = float(max(np.max(defect), 0.0) * delta * delta / (eps * eps))
    else:
        mis, c = 0.0, 0.0
    return WitnessReport(Z, max_ratio, mis, c, int(sel.sum()))


# ---------------------------------------------------------------------------
# comparison with the frozen-coefficient flow


def beta_exponent(q, n=2, beta0=0.5):
    if math.isinf(q):
        if not 0 < beta0 < 1:
            raise DomainError("beta0 must lie in (0, 1)")
        return beta0
    if q <= n + 2:
        raise DomainError(f"q must exceed n + 2 = {n + 2}")
    return 1.0 - (n + 2) / q


@dataclass
class ComparisonReport:
    Q: ParabolicCylinder
    comparison_error: float
    phi_rho: float
    forcing_term: float
    beta: float
    mean_gradient: np.ndarray
    stats: CylinderStats


def comparison_experiment(slab, Q, density, delta, nu=0.125, forcing=0.0, q=math.inf, beta0=0.5):
    """Mean of |grad u - grad v|^2 over Q_{rho/2}, v the frozen-coefficient flow.

    Also reports Phi(rho) and F^2 rho^(2 beta) with F the L^q norm of the
    forcing over Q_rho.
    """
    from .solver import solve_frozen_heat_flow

    eps = density.eps
    stats = classify_branch(slab, Q, delta, eps, nu)
    if stats.branch != "nondegenerate":
        raise WrongBranch(f"comparison needs the nondegenerate branch (ratio {stats.ratio_S:.4f})")
    flow = solve_frozen_heat_flow(slab, Q, density, delta, stats.mu)
    half = Q.scaled(0.5)
    local = flow.slab
    ln = cylinder_nodes(local, half)
    gv = local.nodal_gradients()[ln.slices[:, None], ln.ii, ln.jj]
    ox, oy = flow.window[0].start, flow.window[1].start
    m0 = int(round((local.times[0] - slab.times[0]) / slab.dt))
    gu = slab.nodal_gradients()[(ln.slices + m0)[:, None], ln.ii + ox, ln.jj + oy]
    err = float(np.mean(np.sum((gu - gv) ** 2, axis=-1)))
    beta = beta_exponent(q, 2, beta0)
    f = np.broadcast_to(np.asarray(forcing, dtype=float), slab.values.shape)
    F = lq_norm(_samples(slab, Q, f), slab.grid.h, slab.dt, q)
    return ComparisonReport(
        Q, err, oscillation_energy(slab, Q), F * F * Q.r ** (2 * beta), beta, flow.mean_gradient, stats
    )


# ---------------------------------------------------------------------------
# per-cylinder record


def cylinder_record(slab, Q, delta, eps, nu=0.125, p=2.0, seed=0, theta=0.5, sigma=3.0):
    """Flat record of the cylinder diagnostics with provenance tags.

    Values are ``(value, tag)`` pairs, tag in {configured, measured, fitted}.
    Quantities whose preconditions fail on this cylinder are reported as nan.
    """
    stats = classify_branch(slab, Q, delta, eps, nu)
    rec = {
        "center_x": (Q.center[0], "configured"),
        "center_y": (Q.center[1], "configured"),
        "t0": (Q.t0, "configured"),
        "radius": (Q.r, "configured"),
        "delta": (delta, "configured"),
        "eps": (eps, "configured"),
        "nu": (nu, "configured"),
        "mu": (stats.mu, "measured"),
        "ratio_S": (stats.ratio_S, "measured"),
        "branch": (stats.branch, "measured"),
        "flat": (stats.flat, "measured"),
    }
    kappa = float("nan")
    if stats.branch == "degenerate":
        try:
            kappa = degiorgi_sup_decay(slab, stats)[1]
        except DomainError:
            pass
    rec["kappa_hat"] = (kappa, "measured")
    for s in (0.5, 0.25, 0.125):
        try:
            val = oscillation_energy(slab, Q.scaled(s))
        except DomainError:
            val = float("nan")
        rec[f"phi_{s:g}"] = (val, "measured")
    rec["phi_1"] = (oscillation_energy(slab, Q), "measured")
    try:
        G = truncated_slab(slab, 2 * delta, eps)
        est = holder_fit(G, slab, Q, seed=seed)
        rec["alpha_hat"] = (est.alpha_hat, "fitted")
        rec["holder_flat"] = (est.flat, "measured")
    except DomainError:
        rec["alpha_hat"] = (float("nan"), "fitted")
        rec["holder_flat"] = (False, "measured")
    try:
        rec["moser_ratio"] = (moser_report(slab, Q, theta, p, eps, sigma=sigma).ratio, "measured")
    except DomainError:
        rec["moser_ratio"] = (float("nan"), "measured")
    return rec
