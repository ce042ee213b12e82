"""Truncation maps of the gradient and related moduli.

All maps act on arrays whose trailing axis holds 2-vectors.
"""

from __future__ import annotations

import math

import numpy as np

from .grid import DomainError

C_DAGGER = 1.0 + 64.0 / math.sqrt(255.0)



def _norm(z):
    return np.hypot(z[..., 0], z[..., 1])


def _rescale(z, factor, r):
    # factor * z / |z|, defined as 0 wherever factor vanishes
    safe = np.where(factor > 0, r, 1.0)
    return (np.where(factor > 0, factor / safe, 0.0))[..., None] * z


def g_delta(z, delta):
    """(|z| - delta)_+ z/|z|."""
    if delta < 0:
        raise DomainError("delta must be non-negative")
    z = np.asarray(z, dtype=float)
    if delta == 0:
        return z.copy()
    r = _norm(z)
    return _rescale(z, np.maximum(r - delta, 0.0), r)


def g_delta_eps(z, delta, eps):
    """(sqrt(eps^2 + |z|^2) - delta)_+ z/|z|; requires 0 <= eps < delta."""
    if not 0 <= eps < delta:
        raise DomainError(f"truncation needs 0 <= eps < delta, got eps={eps}, delta={delta}")
    z = np.asarray(z, dtype=float)
    r = _norm(z)
    return _rescale(z, np.maximum(np.sqrt(eps * eps + r * r) - delta, 0.0), r)


def check_eps_delta(eps, delta):
    """The regime 0 < eps < delta/8 under which G_{2 delta, eps} is c_dagger-Lipschitz."""
    if not 0 < eps < delta / 8:
        raise DomainError(f"need 0 < eps < delta/8 (eps={eps}, delta/8={delta / 8})")


def modulus(z, eps):
    z = np.asarray(z, dtype=float)
    return np.sqrt(eps * eps + z[..., 0] ** 2 + z[..., 1] ** 2)


def modulus_field(grad, eps):
    """sqrt(eps^2 + |grad u|^2) at the nodes, from a staggered VectorField."""
    return modulus(grad.at_nodes(), eps)


def w_k_field(grad, k):
    return w_k(grad.at_nodes(), k)


def g_p_eps(z, p, eps):
    """(eps^2 + |z|^2)^((p-1)/2) z."""
    if not p > 1 or eps < 0:
        raise DomainError("need p > 1 and eps >= 0")
    z = np.asarray(z, dtype=float)
    v2 = eps * eps + z[..., 0] ** 2 + z[..., 1] ** 2
    return (v2 ** (0.5 * (p - 1.0)))[..., None] * z


def g_p_eps_inverse(w, p, eps, tol=1e-14, maxiter=100):
    """Invert G_{p,eps} by Newton's method on the modulus.

    G maps rays to rays, so only t = |z| solves (eps^2+t^2)^((p-1)/2) t = |w|.
    """
    w = np.asarray(w, dtype=float)
    m = _norm(w)
    t = np.minimum(m ** (1.0 / p), m)
    t = np.where(m > 0, np.maximum(t, 0.0), 0.0)
    for _ in range(maxiter):
        v2 = eps * eps + t * t
        f = v2 ** (0.5 * (p - 1.0)) * t - m
        df = v2 ** (0.5 * (p - 3.0)) * (eps * eps + p * t * t)
        step = np.where(df > 0, f / np.where(df > 0, df, 1.0), 0.0)
        t_new = np.maximum(t - step, 0.5 * t)
        if np.all(np.abs(t_new - t) <= tol * np.maximum(1.0, t_new)):
            t = t_new
            break
        t = t_new
    return _rescale(w, t, m)


def soft_threshold(sigma, k):
    """Scalar g_k: sigma - k above k, sigma + k below -k, zero between."""
    sigma = np.asarray(sigma, dtype=float)
    return np.sign(sigma) * np.maximum(np.abs(sigma) - k, 0.0)


def w_k(z, k):
    """sqrt(k^2 + sum_j g_k(z_j)^2) for gradients z."""
    if k < 1:
        raise DomainError("W_k needs k >= 1")
    z = np.asarray(z, dtype=float)
    g = soft_threshold(z, k)
    return np.sqrt(k * k + np.sum(g * g, axis=-1))


def lipschitz_quotients(z1, z2, delta, eps):
    """|G_{2delta,eps}(z1) - G_{2delta,eps}(z2)| / |z1 - z2| for paired samples."""
    a = g_delta_eps(z1, 2 * delta, eps)
    b = g_delta_eps(z2, 2 * delta, eps)
    num = _norm(a - b)
    den = _norm(np.asarray(z1) - np.asarray(z2))
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def fit_gp_monotonicity(p, eps, n=10_000, seed=0, radius=5.0):
    """Smallest observed |G(z1)-G(z2)| / (max(|z1|,|z2|)^(p-1) |z1-z2|)."""
    rng = np.random.default_rng(seed)
    z1 = rng.uniform(-radius, radius, (n, 2))
    z2 = rng.uniform(-radius, radius, (n, 2))
    num = _norm(g_p_eps(z1, p, eps) - g_p_eps(z2, p, eps))
    den = np.maximum(_norm(z1), _norm(z2)) ** (p - 1.0) * _norm(z1 - z2)
    return float(np.min(num / den))
