"""Structural property suites of the densities and truncations.

Each suite returns a :class:`SuiteResult`; the ``verify`` command and the
acceptance tests share them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .energy import DensityParams, MollifiedDensity, fit_constants, strong_monotonicity_gap
from .truncation import (
    C_DAGGER,
    g_delta,
    g_delta_eps,
    g_p_eps,
    g_p_eps_inverse,
    lipschitz_quotients,
    modulus,
    w_k,
)

STABILITY_TOL = 0.05


@dataclass
class SuiteResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)

    def line(self):
        return f"{self.name}: {'PASS' if self.passed else 'FAIL'}"


def _spread(values):
    v = np.asarray(values, dtype=float)
    if np.all(v == 0):
        return 0.0
    return float(v.max() / v.min() - 1.0) if v.min() > 0 else math.inf


def structural_suite(
    p_values=(1.5, 2.0, 3.0),
    eps_values=(0.1, 0.05, 0.025),
    modes=("surrogate", "quadrature"),
    b1=1.0,
    bp=1.0,
    n=10_000,
    seed=0,
    n_pairs=10_000,
):
    """Hessian bounds with fitted constants, their stability in eps, gradient
    bound of the one-homogeneous part, and the monotonicity sign."""
    details = {}
    ok = True
    rng = np.random.default_rng(seed)
    z1 = rng.uniform(-5, 5, (n_pairs, 2))
    z2 = rng.uniform(-5, 5, (n_pairs, 2))
    for mode in modes:
        for p in p_values:
            fits = []
            for eps in eps_values:
                dens = MollifiedDensity(DensityParams(p, b1, bp), eps, mode=mode)
                fc = fit_constants(dens, n=n, seed=seed)
                fits.append(fc)
                gap = strong_monotonicity_gap(dens, z1, z2)
                key = f"{mode}.p{p:g}.eps{eps:g}"
                details[key + ".min_gap"] = float(gap.min())
                details[key + ".grad_one_max"] = fc.grad_one_max
                details[key + ".psd_defect"] = fc.one_psd_defect
                ok &= bool(gap.min() >= 0.0)
                ok &= fc.grad_one_max <= b1 * (1 + 1e-8)
                ok &= fc.one_psd_defect >= -1e-8 * max(fc.K, 1.0)
            for name in ("K", "lam", "Lam"):
                vals = [getattr(f, name) for f in fits]
                s = _spread(vals)
                details[f"{mode}.p{p:g}.{name}"] = vals
                details[f"{mode}.p{p:g}.{name}.spread"] = s
                ok &= s <= STABILITY_TOL
            ok &= min(f.lam for f in fits) > 0
    return SuiteResult("structural inequalities", bool(ok), details)


def lipschitz_suite(n_pairs=100_000, seed=0, deltas=(0.05, 0.2, 0.5)):
    """Difference quotients of G_{2 delta, eps} against c_dagger, eps < delta/8.

    Half the pairs are uniform in a ball of radius 6 delta, half are close
    pairs straddling the truncation sphere where the quotient peaks.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    violations = 0
    counts = [n_pairs // len(deltas) + (k < n_pairs % len(deltas)) for k in range(len(deltas))]
    details = {}
    for delta, per in zip(deltas, counts):
        eps = rng.uniform(0, delta / 8) * (1 - 1e-12)
        m = per // 2
        a = rng.uniform(-6 * delta, 6 * delta, (m, 2))
        b = rng.uniform(-6 * delta, 6 * delta, (m, 2))
        ang = rng.uniform(0, 2 * np.pi, per - m)
        rad = 2 * delta + rng.normal(0, delta / 4, per - m)
        c = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
        d = c + rng.normal(0, delta / 20, c.shape)
        q = np.concatenate([lipschitz_quotients(a, b, delta, eps), lipschitz_quotients(c, d, delta, eps)])
        violations += int(np.count_nonzero(q > C_DAGGER))
        worst = max(worst, float(q.max()))
        details[f"delta{delta:g}.eps"] = eps
        details[f"delta{delta:g}.max_quotient"] = float(q.max())
    details.update({"c_dagger": C_DAGGER, "max_quotient": worst, "violations": violations, "n_pairs": sum(counts)})
    return SuiteResult("truncation Lipschitz bound", violations == 0, details)


def truncation_suite(n=10_000, seed=0):
    """delta-continuity, support, ray monotonicity, W_k compatibility, inverse bound."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(-3, 3, (n, 2))
    d1, d2 = rng.uniform(0, 1, 2)
    cont = float(np.max(np.linalg.norm(g_delta(z, d1) - g_delta(z, d2), axis=1)))
    delta, eps = 0.4, 0.03
    G = g_delta_eps(z, delta, eps)
    V = modulus(z, eps)
    support_ok = bool(np.array_equal(np.all(G == 0, axis=1), V <= delta))
    t = np.linspace(0, 3, 400)
    ray = g_delta_eps(np.column_stack([t, 0.5 * t]), delta, eps)
    mono_ok = bool(np.all(np.diff(np.linalg.norm(ray, axis=1)) >= 0))
    k = 1.0
    big = z[np.linalg.norm(z, axis=1) > k]
    wk_ratio = float(np.max(w_k(big, k) / modulus(big, eps)))
    inv = []
    for p in (1.5, 2.0, 3.0):
        w = g_p_eps(z, p, eps)
        back = g_p_eps_inverse(w, p, eps)
        rt = float(np.max(np.abs(back - z)))
        mw = np.linalg.norm(w, axis=1)
        sel = mw > 0
        cp = float(np.max(np.linalg.norm(back[sel], axis=1) / mw[sel] ** (1 / p)))
        inv.append((p, rt, cp))
    details = {
        "delta_continuity_excess": cont - abs(d1 - d2),
        "support_exact": support_ok,
        "ray_monotone": mono_ok,
        "wk_over_v_max": wk_ratio,
    }
    for p, rt, cp in inv:
        details[f"p{p:g}.inverse_roundtrip"] = rt
        details[f"p{p:g}.inverse_bound"] = cp
    ok = cont <= abs(d1 - d2) + 1e-12 and support_ok and mono_ok and wk_ratio <= math.sqrt(2) + 1e-12
    ok = ok and all(rt < 1e-8 for _, rt, _ in inv)
    return SuiteResult("truncation properties", bool(ok), details)


def run_all(seed=0, quick=False):
    n = 2_000 if quick else 10_000
    return [
        structural_suite(n=n, seed=seed, n_pairs=n),
        lipschitz_suite(n_pairs=20_000 if quick else 100_000, seed=seed),
        truncation_suite(n=n, seed=seed),
    ]
