"""Singular densities, their Friedrichs mollifications, and structural checks.

The density is ``E(z) = b1*|z| + bp*|z|**p / p`` on R^2.  Its regularization
``E_eps = E_{1,eps} + E_{p,eps}`` comes in two flavours:

* ``surrogate``: closed form, ``b1*sqrt(eps^2+|z|^2) + bp*(eps^2+|z|^2)**(p/2)/p``.
* ``quadrature``: the true convolution ``j_eps * E`` with the bump
  ``j(x) = (4/pi) (1-|x|^2)^3`` on the unit disk, tabulated once on a radial
  grid at eps = 1 and rescaled through the homogeneity of ``|z|**s``.

For p >= 2 the power term is smooth enough and is always used in its shifted
closed form (both modes); only p < 2 mollifies it by quadrature.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BPoly
from scipy.special import roots_jacobi, roots_legendre

MOLLIFIER_MASS = 4.0 / math.pi

QUAD_TOL = 1e-10


class ConfigurationError(ValueError):
    """Invalid or incomplete density configuration."""


class QuadratureError(RuntimeError):
    """Raised when order doubling fails to reach the requested tolerance."""

    def __init__(self, message, achieved):
        super().__init__(f"{message} (achieved {achieved:.3e})")
        self.achieved = achieved


@dataclass(frozen=True)
class DensityParams:
    p: float
    b1: float = 1.0
    bp: float = 1.0

    def __post_init__(self):
        if not self.p > 1:
            raise ConfigurationError("p must exceed 1")
        if not self.bp > 0:
            raise ConfigurationError("bp must be positive")
        if self.b1 < 0:
            raise ConfigurationError("b1 must be non-negative")


# ---------------------------------------------------------------------------
# radial quadrature of j * (rho**s / s) and its first two r-derivatives, eps = 1


def _bump_terms(x1, x2sq):
    """Return (j, d1 j, d11 j) of the bump at points with first coordinate x1
    and squared modulus x2sq."""
    a = 1.0 - x2sq
    c = MOLLIFIER_MASS
    j0 = c * a**3
    j1 = -6.0 * c * x1 * a**2
    j2 = c * (24.0 * x1**2 * a - 6.0 * a**2)
    return j0, j1, j2


def _inside(r, s, n_theta, n_rho):
    # origin inside the support disk: rays from the origin, rho in [0, rho_plus]
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    rho_plus = r * cos_t + np.sqrt(1.0 - (r * sin_t) ** 2)
    xj, wj = roots_jacobi(n_rho, 0.0, s + 1.0)
    rho = 0.5 * rho_plus[:, None] * (1.0 + xj[None, :])
    x1 = r - rho * cos_t[:, None]
    x2sq = r * r - 2.0 * r * rho * cos_t[:, None] + rho * rho
    terms = _bump_terms(x1, x2sq)
    scale = (0.5 * rho_plus) ** (s + 2.0) / s
    dtheta = 2.0 * np.pi / n_theta
    return np.array([dtheta * np.sum(scale * (t @ wj)) for t in terms])


def _outside_near(r, s, n_psi, n_rho):
    # origin outside the support disk, chord parametrized by sin(theta) = sin(psi)/r
    xp, wp = roots_legendre(n_psi)
    psi = 0.5 * np.pi * xp
    sin_t = np.sin(psi) / r
    cos_t = np.sqrt(1.0 - sin_t**2)
    half = np.cos(psi)
    xr, wr = roots_legendre(n_rho)
    rho = (r * cos_t)[:, None] + half[:, None] * xr[None, :]
    x1 = r - rho * cos_t[:, None]
    x2sq = r * r - 2.0 * r * rho * cos_t[:, None] + rho * rho
    radial = np.abs(rho) ** (s + 1.0) / s
    jac = half * (half / (r * cos_t)) * (0.5 * np.pi)
    return np.array([np.sum(jac * wp * ((t * radial) @ wr)) for t in _bump_terms(x1, x2sq)])


def _outside_far(r, s, n_ang, n_rad):
    # support disk far from the origin: integrate the smooth density against j
    # in polar coordinates centred at z
    ang = 2.0 * np.pi * np.arange(n_ang) / n_ang
    xs, ws = roots_legendre(n_rad)
    sw = 0.5 * (xs + 1.0)
    ws = 0.5 * ws
    j = MOLLIFIER_MASS * (1.0 - sw**2) ** 3 * sw * ws
    y1 = r - sw[:, None] * np.cos(ang)[None, :]
    y2 = -sw[:, None] * np.sin(ang)[None, :]
    m2 = y1 * y1 + y2 * y2
    m = np.sqrt(m2)
    f0 = m**s / s
    f1 = m ** (s - 2.0) * y1
    f2 = m ** (s - 2.0) * (1.0 + (s - 2.0) * y1 * y1 / m2)
    dang = 2.0 * np.pi / n_ang
    return np.array([dang * np.sum(j[:, None] * f) for f in (f0, f1, f2)])


def _radial_moments_once(r, s, level):
    if r < 1.0:
        return _inside(r, s, 64 * 2**level, 8 * 2**level)
    if r < 2.0:
        return _outside_near(r, s, 48 * 2**level, 12 * 2**level)
    return _outside_far(r, s, 32 * 2**level, 16 * 2**level)


def radial_moments(r, s, tol=QUAD_TOL, max_level=6):
    """(g, g', g'') of ``j * |.|**s / s`` at radius ``r`` for eps = 1.

    Accuracy is controlled by order doubling; the accepted level must agree
    with the next one to ``tol + 1e-13*|g|`` in every component.
    """
    prev = _radial_moments_once(r, s, 0)
    for level in range(1, max_level + 1):
        cur = _radial_moments_once(r, s, level)
        err = np.abs(cur - prev)
        if np.all(err <= tol + 1e-13 * np.abs(cur)):
            return cur, float(err.max())
        prev = cur
    raise QuadratureError(f"radial quadrature did not converge at r={r}", float(err.max()))


def unit_knots(w_max):
    near = np.arange(0, 65) / 16.0
    far = [near[-1]]
    while far[-1] < w_max:
        far.append(far[-1] * 1.08)
    return np.concatenate([near, np.array(far[1:])])


@dataclass(frozen=True)
class RadialProfile:
    """Tabulated radial restriction g of a mollified density at one eps."""

    eps: float
    knots: np.ndarray
    g: np.ndarray
    dg: np.ndarray
    d2g: np.ndarray
    max_error: float = 0.0
    order: int = 5

    def convexity_defect(self):
        """Most negative discrete second difference of g (0 if convex)."""
        k, g = self.knots, self.g
        slopes = np.diff(g) / np.diff(k)
        return float(min(0.0, np.min(np.diff(slopes))))


@functools.lru_cache(maxsize=32)
def _unit_table(s, w_max):
    knots = unit_knots(w_max)
    vals = np.empty((knots.size, 3))
    worst = 0.0
    for i, w in enumerate(knots):
        vals[i], err = radial_moments(float(w), s)
        worst = max(worst, err)
    vals[0, 1] = 0.0  # radial symmetry
    interp = BPoly.from_derivatives(knots, vals, orders=5)
    return knots, vals, interp, interp.derivative(), interp.derivative(2), worst


def mollify_radial(params, component, eps, quadrature_order=None, r_max=10.0):
    """Tabulate the radial profile of E_{1,eps} or E_{p,eps}.

    ``quadrature_order`` is accepted for API symmetry; accuracy is driven by
    order doubling to ``QUAD_TOL``.
    """
    if not 0.0 < eps < 1.0:
        raise ConfigurationError("eps must lie in (0, 1)")
    if component == "E1":
        s, b = 1.0, params.b1
    elif component == "Ep":
        s, b = float(params.p), params.bp
    else:
        raise ConfigurationError(f"unknown component {component!r}")
    knots, vals, *_, worst = _unit_table(s, float(max(r_max / eps, 64.0)))
    return RadialProfile(
        eps=eps,
        knots=eps * knots,
        g=b * eps**s * vals[:, 0],
        dg=b * eps ** (s - 1.0) * vals[:, 1],
        d2g=b * eps ** (s - 2.0) * vals[:, 2],
        max_error=worst,
    )


# ---------------------------------------------------------------------------
# radial terms; each returns (g, g'/r, g'') as arrays shaped like r


class _Term:
    def radial(self, r):
        raise NotImplementedError


@dataclass(frozen=True)
class _ShiftedPower(_Term):
    """b * (eps^2 + r^2)**(s/2) / s."""

    b: float
    s: float
    eps: float

    def radial(self, r):
        v2 = self.eps**2 + r * r
        if self.s == 2.0:
            one = np.ones_like(r)
            return 0.5 * self.b * v2, self.b * one, self.b * one
        with np.errstate(divide="ignore", invalid="ignore"):
            q = self.b * v2 ** (0.5 * self.s - 1.0)
            g2 = q * (self.eps**2 + (self.s - 1.0) * r * r) / v2
        if self.eps == 0.0:
            # the closed form is singular at the origin only when s < 2
            zero = r == 0.0
            q = np.where(zero, 0.0 if self.s > 2 else np.inf, q)
            g2 = np.where(zero, 0.0 if self.s > 2 else np.inf, g2)
        return self.b * v2 ** (0.5 * self.s) / self.s, q, g2


@dataclass(frozen=True)
class _TabulatedPower(_Term):
    """b * eps**s * G(r/eps) with G the unit mollified profile of rho**s/s."""

    b: float
    s: float
    eps: float
    w_max: float

    def radial(self, r):
        knots, _, g0, g1, g2, _ = _unit_table(self.s, self.w_max)
        shape = np.shape(r)
        w = np.ravel(np.asarray(r, dtype=float) / self.eps)
        inside = w <= knots[-1]
        out_g = np.empty_like(w)
        out_q = np.empty_like(w)
        out_h = np.empty_like(w)
        wi = w[inside]
        out_g[inside] = g0(wi)
        d1 = g1(wi)
        out_h[inside] = g2(wi)
        small = wi < 1e-6
        with np.errstate(divide="ignore", invalid="ignore"):
            out_q[inside] = np.where(small, out_h[inside], d1 / np.where(small, 1.0, wi))
        for idx in np.flatnonzero(~inside):
            vals, _ = radial_moments(float(w[idx]), self.s)
            out_g[idx], out_q[idx], out_h[idx] = vals[0], vals[1] / w[idx], vals[2]
        sc = self.b * self.eps**self.s
        q = sc / self.eps**2
        return (sc * out_g).reshape(shape), (q * out_q).reshape(shape), (q * out_h).reshape(shape)


class MollifiedDensity:
    """Regularized density ``E_eps`` with vectorized value, gradient, Hessian.

    Points ``z`` are arrays whose last axis has length 2.  Immutable after
    construction; quadrature tables are shared through a module cache.
    """

    def __init__(self, params, eps, mode="surrogate", r_max=10.0):
        if mode not in ("surrogate", "quadrature"):
            raise ConfigurationError(f"unknown mode {mode!r}")
        if eps < 0 or eps >= 1:
            raise ConfigurationError("eps must lie in [0, 1)")
        if eps == 0 and (params.b1 > 0 or params.p < 2):
            raise ConfigurationError("eps = 0 is only allowed for b1 = 0 and p >= 2")
        if mode == "quadrature" and eps == 0:
            raise ConfigurationError("quadrature mode needs eps > 0")
        self.params = params
        self.eps = float(eps)
        self.mode = mode
        self.r_max = r_max
        w_max = max(r_max / eps, 64.0) if eps > 0 else 0.0
        terms = []
        if params.b1 > 0:
            if mode == "quadrature":
                terms.append(_TabulatedPower(params.b1, 1.0, self.eps, w_max))
            else:
                terms.append(_ShiftedPower(params.b1, 1.0, self.eps))
        self.one = terms[0] if terms else None
        if mode == "quadrature" and params.p < 2:
            self.power = _TabulatedPower(params.bp, float(params.p), self.eps, w_max)
        else:
            self.power = _ShiftedPower(params.bp, float(params.p), self.eps)
        self._terms = tuple(terms) + (self.power,)

    def __repr__(self):
        p = self.params
        return f"MollifiedDensity(p={p.p}, b1={p.b1}, bp={p.bp}, eps={self.eps}, mode={self.mode!r})"

    def radial(self, r, terms=None):
        r = np.asarray(r, dtype=float)
        g = np.zeros_like(r)
        q = np.zeros_like(r)
        h = np.zeros_like(r)
        for t in self._terms if terms is None else terms:
            a, b, c = t.radial(r)
            g += a
            q += b
            h += c
        return g, q, h

    def _split(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != 2:
            raise ValueError("points must have a trailing axis of length 2")
        return z, np.hypot(z[..., 0], z[..., 1])

    def eval(self, z, terms=None):
        _, r = self._split(z)
        return self.radial(r, terms)[0]

    def grad(self, z, terms=None):
        z, r = self._split(z)
        _, q, _ = self.radial(r, terms)
        return q[..., None] * z

    def hess(self, z, terms=None):
        z, r = self._split(z)
        _, q, h = self.radial(r, terms)
        return _assemble_hess(z, r, q, h)

    def hess_components(self, z, terms=None):
        """(hxx, hxy, hyy) arrays; cheaper than the full matrices."""
        z, r = self._split(z)
        _, q, h = self.radial(r, terms)
        with np.errstate(divide="ignore", invalid="ignore"):
            r2 = np.where(r > 0, r * r, 1.0)
            c = np.where(r > 0, (h - q) / r2, 0.0)
        x, y = z[..., 0], z[..., 1]
        return q + c * x * x, c * x * y, q + c * y * y

    def flux_and_hess(self, z):
        """Gradient and Hessian components in one radial evaluation."""
        z, r = self._split(z)
        _, q, h = self.radial(r)
        with np.errstate(divide="ignore", invalid="ignore"):
            r2 = np.where(r > 0, r * r, 1.0)
            c = np.where(r > 0, (h - q) / r2, 0.0)
        x, y = z[..., 0], z[..., 1]
        return q * x, q * y, q + c * x * x, c * x * y, q + c * y * y

    @property
    def one_terms(self):
        return (self.one,) if self.one is not None else ()

    @property
    def power_terms(self):
        return (self.power,)


def _assemble_hess(z, r, q, h):
    out = np.zeros(z.shape + (2,))
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(r > 0, r * r, 1.0)
        c = np.where(r > 0, (h - q) / r2, 0.0)
    x, y = z[..., 0], z[..., 1]
    out[..., 0, 0] = q + c * x * x
    out[..., 0, 1] = out[..., 1, 0] = c * x * y
    out[..., 1, 1] = q + c * y * y
    return out


@dataclass(frozen=True)
class QuadraticDensity:
    """``E(z) = z.A z / 2`` with a constant SPD matrix; used for frozen flows."""

    A: np.ndarray = field(default_factory=lambda: np.eye(2))

    def eval(self, z):
        z = np.asarray(z, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", z, self.A, z)

    def grad(self, z):
        return np.asarray(z, dtype=float) @ self.A.T

    def hess(self, z):
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(self.A, z.shape + (2,)).copy()

    def flux_and_hess(self, z):
        z = np.asarray(z, dtype=float)
        a = self.A
        fx = a[0, 0] * z[..., 0] + a[0, 1] * z[..., 1]
        fy = a[1, 0] * z[..., 0] + a[1, 1] * z[..., 1]
        one = np.ones(z.shape[:-1])
        return fx, fy, a[0, 0] * one, a[0, 1] * one, a[1, 1] * one


def strong_monotonicity_gap(density, z1, z2):
    """<grad E(z1) - grad E(z2), z1 - z2>, vectorized over leading axes."""
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    return np.sum((density.grad(z1) - density.grad(z2)) * (z1 - z2), axis=-1)


def mollifier_first_moment():
    """m1 = integral of j(y)|y| over the unit disk, closed form 128/315."""
    return 128.0 / 315.0


# ---------------------------------------------------------------------------
# empirical structural constants


def sample_points(n, seed, r_min=1e-4, r_max=5.0):
    """Points with log-uniform modulus and uniform angle, plus the origin."""
    rng = np.random.default_rng(seed)
    r = np.exp(rng.uniform(np.log(r_min), np.log(r_max), n - 1))
    a = rng.uniform(0, 2 * np.pi, n - 1)
    pts = np.column_stack([r * np.cos(a), r * np.sin(a)])
    return np.vstack([np.zeros((1, 2)), pts])


@dataclass
class FittedConstants:
    K: float
    lam: float
    Lam: float
    grad_one_max: float
    one_psd_defect: float
    n_samples: int

    def as_dict(self):
        return {
            "K": self.K,
            "lambda": self.lam,
            "Lambda": self.Lam,
            "grad_one_max": self.grad_one_max,
            "one_psd_defect": self.one_psd_defect,
        }


def fit_constants(density, n=10_000, seed=0, r_max=5.0):
    """Fit the tight constants of the Hessian bounds on sampled points.

    ``K`` bounds ``V * lambda_max(hess E1)``; ``lam``/``Lam`` bracket the
    eigenvalues of ``hess Ep`` divided by ``V**(p-2)``.
    """
    z = sample_points(n, seed, r_max=r_max)
    eps = density.eps
    v2 = eps**2 + np.sum(z * z, axis=1)
    p = density.params.p
    if density.one_terms:
        e1 = np.linalg.eigvalsh(density.hess(z, density.one_terms))
        K = float(np.max(e1[:, 1] * np.sqrt(v2)))
        defect = float(min(0.0, np.min(e1[:, 0] * np.sqrt(v2))))
        gmax = float(np.max(np.linalg.norm(density.grad(z, density.one_terms), axis=1)))
    else:
        K, defect, gmax = 0.0, 0.0, 0.0
    ep = np.linalg.eigvalsh(density.hess(z, density.power_terms))
    scale = v2 ** (0.5 * p - 1.0)
    return FittedConstants(
        K=K,
        lam=float(np.min(ep[:, 0] / scale)),
        Lam=float(np.max(ep[:, 1] / scale)),
        grad_one_max=gmax,
        one_psd_defect=defect,
        n_samples=n,
    )
