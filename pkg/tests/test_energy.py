import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from oneplap.energy import (
    ConfigurationError,
    DensityParams,
    MollifiedDensity,
    QuadraticDensity,
    fit_constants,
    mollifier_first_moment,
    mollify_radial,
    sample_points,
    strong_monotonicity_gap,
)

MODES = ("surrogate", "quadrature")


def _m1_oracle():
    # integral of j(y)|y| over the unit disk in polar coordinates
    val, _ = integrate.dblquad(lambda r, th: (4 / np.pi) * (1 - r * r) ** 3 * r * r, 0, 2 * np.pi, 0, 1)
    return val


def test_first_moment_closed_form_matches_quadrature():
    assert mollifier_first_moment() == pytest.approx(_m1_oracle(), rel=1e-12)
    assert mollifier_first_moment() == pytest.approx(128 / 315, rel=1e-15)


def test_params_reject_p_at_most_one():
    with pytest.raises(ConfigurationError, match="p must exceed 1"):
        DensityParams(1.0)


def test_eps_zero_only_for_smooth_case():
    MollifiedDensity(DensityParams(2.0, 0.0, 1.0), 0.0)
    with pytest.raises(ConfigurationError):
        MollifiedDensity(DensityParams(2.0, 1.0, 1.0), 0.0)
    with pytest.raises(ConfigurationError):
        MollifiedDensity(DensityParams(1.5, 0.0, 1.0), 0.0)


def test_surrogate_quadratic_value_at_origin():
    d = MollifiedDensity(DensityParams(2.0, 0.0, 1.0), 0.1)
    assert d.eval(np.zeros(2)) == pytest.approx(0.005, abs=1e-16)


@pytest.mark.parametrize("eps", [0.1, 0.05, 0.01])
def test_quadrature_one_part_at_origin_is_eps_m1(eps):
    d = MollifiedDensity(DensityParams(2.0, 1.0, 1.0), eps, mode="quadrature")
    assert d.eval(np.zeros(2), d.one_terms) == pytest.approx(eps * _m1_oracle(), abs=1e-10)


def test_quadrature_one_part_far_out_dominates_modulus():
    eps = 0.05
    d = MollifiedDensity(DensityParams(2.0, 1.0, 1.0), eps, mode="quadrature")
    ang = np.linspace(0, 2 * np.pi, 17)
    z = 10 * eps * np.column_stack([np.cos(ang), np.sin(ang)])
    val = d.eval(z, d.one_terms)
    assert np.all(val >= 10 * eps - 1e-10)
    assert np.all(val - 10 * eps <= eps**2 / (10 * eps))


def test_quadratic_density_gradient_and_hessian():
    d = MollifiedDensity(DensityParams(2.0, 0.0, 1.0), 0.07)
    z = np.random.default_rng(0).normal(size=(50, 2))
    np.testing.assert_allclose(d.grad(z), z, atol=1e-15)
    np.testing.assert_allclose(d.hess(z), np.broadcast_to(np.eye(2), (50, 2, 2)), atol=1e-15)


def test_surrogate_one_part_gradient_tends_to_unit_vector():
    z = np.array([3.0, 4.0])
    for eps in (1e-2, 1e-4, 1e-6):
        d = MollifiedDensity(DensityParams(2.0, 1.0, 1.0), eps)
        g = d.grad(z, d.one_terms)
        assert np.linalg.norm(g - [0.6, 0.8]) <= eps**2
    d = MollifiedDensity(DensityParams(2.0, 1.0, 1.0), 1e-6)
    np.testing.assert_allclose(d.grad(z, d.one_terms), [0.6, 0.8], atol=1e-12)


def test_hessian_inside_fitted_bracket_at_sample_point():
    eps = 0.05
    d = MollifiedDensity(DensityParams(3.0, 1.0, 1.0), eps, mode="quadrature")
    fc = fit_constants(d, n=10_000, seed=0)
    z = np.array([0.5, 0.0])
    v = math.hypot(eps, 0.5)
    ev = np.linalg.eigvalsh(d.hess(z))
    slack = 1e-8 * ev.max()
    assert ev.min() >= fc.lam * v - slack
    assert ev.max() <= fc.Lam * v + fc.K / v + slack


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_hessian_bounds_hold_on_all_samples(mode, p):
    eps = 0.05
    d = MollifiedDensity(DensityParams(p, 1.0, 1.0), eps, mode=mode)
    fc = fit_constants(d, n=2_000, seed=3)
    z = sample_points(2_000, seed=4)
    v = np.sqrt(eps**2 + np.sum(z * z, axis=1))
    e1 = np.linalg.eigvalsh(d.hess(z, d.one_terms))
    assert np.all(e1[:, 0] >= -1e-8 * fc.K / v)
    # fitted on other samples: allow the usual containment slack plus sampling gap
    assert np.all(e1[:, 1] * v <= fc.K * (1 + 1e-3))
    ep = np.linalg.eigvalsh(d.hess(z, d.power_terms)) / (v ** (p - 2))[:, None]
    assert ep.min() >= fc.lam * (1 - 1e-3)
    assert ep.max() <= fc.Lam * (1 + 1e-3)


@pytest.mark.parametrize("mode", MODES)
def test_one_part_gradient_bounded_by_b1(mode):
    b1 = 1.7
    d = MollifiedDensity(DensityParams(2.0, b1, 1.0), 0.03, mode=mode)
    z = sample_points(5_000, seed=2, r_max=50.0)
    assert np.max(np.linalg.norm(d.grad(z, d.one_terms), axis=1)) <= b1 * (1 + 1e-8)


def _fd_orders(f, df, z, steps):
    errs = []
    for h in steps:
        num = np.stack(
            [(f(z + h * e) - f(z - h * e)) / (2 * h) for e in np.eye(2)], axis=-1
        )
        errs.append(np.max(np.abs(num - df(z))))
    return errs


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("p", [1.5, 3.0])
def test_gradient_and_hessian_are_derivatives(mode, p):
    eps = 0.1
    d = MollifiedDensity(DensityParams(p, 1.0, 1.0), eps, mode=mode)
    rng = np.random.default_rng(7)
    r = rng.uniform(0.3, 2.0, 100)
    a = rng.uniform(0, 2 * np.pi, 100)
    z = np.column_stack([r * np.cos(a), r * np.sin(a)])
    steps = (1e-3, 1e-4)
    e_g = _fd_orders(d.eval, d.grad, z, steps)
    e_h = _fd_orders(d.grad, lambda x: d.hess(x), z, steps)
    for e in (e_g, e_h):
        if e[1] > 1e-9:
            assert math.log10(e[0] / e[1]) >= 1.9
        else:
            assert e[0] < 1e-6


def test_radial_profile_brackets_modulus():
    eps = 0.05
    prof = mollify_radial(DensityParams(2.0, 1.0, 1.0), "E1", eps)
    far = prof.knots >= 2 * eps
    gap = prof.g[far] - prof.knots[far]
    assert np.all(gap >= -1e-10) and np.all(gap <= eps)
    assert np.all(np.diff(gap) <= 1e-12)
    assert prof.dg[0] == 0.0
    assert prof.g[0] == pytest.approx(eps * 128 / 315, abs=1e-10)
    assert prof.convexity_defect() >= -1e-10


def test_modes_agree_within_bracket():
    eps = 0.05
    sur = MollifiedDensity(DensityParams(2.0, 1.0, 1.0), eps)
    quad = MollifiedDensity(DensityParams(2.0, 1.0, 1.0), eps, mode="quadrature")
    r = np.linspace(2 * eps, 3.0, 200)
    z = np.column_stack([r, 0 * r])
    a, b = sur.eval(z, sur.one_terms), quad.eval(z, quad.one_terms)
    for v in (a, b):
        assert np.all(v >= r - 1e-10) and np.all(v <= r + eps)


def test_quadratic_density_matches_surrogate_case():
    qd = QuadraticDensity(np.eye(2))
    d = MollifiedDensity(DensityParams(2.0, 0.0, 1.0), 0.0)
    z = np.random.default_rng(1).normal(size=(20, 2))
    np.testing.assert_allclose(qd.eval(z), d.eval(z), rtol=1e-14)
    np.testing.assert_allclose(qd.grad(z), d.grad(z), rtol=1e-14)


def test_monotonicity_gap_examples():
    d3 = MollifiedDensity(DensityParams(3.0, 1.0, 1.0), 0.05)
    z = np.random.default_rng(3).normal(size=(10, 2))
    np.testing.assert_array_equal(strong_monotonicity_gap(d3, z, z), 0.0)
    d2 = MollifiedDensity(DensityParams(2.0, 0.0, 1.0), 0.1)
    w = np.random.default_rng(4).normal(size=(10, 2))
    np.testing.assert_allclose(strong_monotonicity_gap(d2, z, w), np.sum((z - w) ** 2, axis=1), rtol=1e-13)


def test_monotonicity_gap_cubic_lower_bound():
    # for p = 3 the power part alone gives gap >= 2^(2-p) |z1 - z2|^p
    d = MollifiedDensity(DensityParams(3.0, 1.0, 1.0), 0.05)
    rng = np.random.default_rng(11)

    def ball(n):
        r = 5 * np.sqrt(rng.uniform(0, 1, n))
        a = rng.uniform(0, 2 * np.pi, n)
        return np.column_stack([r * np.cos(a), r * np.sin(a)])

    z1, z2 = ball(100_000), ball(100_000)
    gap = strong_monotonicity_gap(d, z1, z2)
    ratio = gap / np.linalg.norm(z1 - z2, axis=1) ** 3
    assert gap.min() >= 0
    assert ratio.min() >= 0.5 * (1 - 1e-12)


vec = st.tuples(st.floats(-20, 20), st.floats(-20, 20))


@settings(max_examples=200, deadline=None)
@given(vec, vec, st.sampled_from([1.5, 2.0, 3.0]), st.sampled_from([0.1, 0.01]))
def test_property_monotone_gradient(a, b, p, eps):
    d = MollifiedDensity(DensityParams(p, 1.0, 1.0), eps)
    assert strong_monotonicity_gap(d, np.array(a), np.array(b)) >= -1e-12 * (1 + np.hypot(*a) + np.hypot(*b)) ** p


@settings(max_examples=200, deadline=None)
@given(vec, st.sampled_from([0.1, 0.03]))
def test_property_radial_symmetry(a, eps):
    d = MollifiedDensity(DensityParams(1.5, 1.0, 1.0), eps, mode="quadrature")
    z = np.array(a)
    rot = np.array([[0.0, -1.0], [1.0, 0.0]]) @ z
    assert d.eval(rot) == pytest.approx(d.eval(z), rel=1e-12, abs=1e-15)
    np.testing.assert_allclose(d.grad(rot), np.array([[0.0, -1.0], [1.0, 0.0]]) @ d.grad(z), atol=1e-12)
