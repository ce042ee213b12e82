import math

import numpy as np
import pytest

from oneplap.diagnostics import holder_fit, truncated_slab
from oneplap.energy import DensityParams, MollifiedDensity
from oneplap.grid import DomainError, ParabolicCylinder
from oneplap.scenarios import (
    BinghamPipeSpec,
    bingham_builder,
    bingham_exact_profile,
    epsilon_sweep,
    manufactured_case,
    manufactured_forcing,
    observed_order,
    oracle_errors,
    radial_anisotropy,
    run_bingham,
    run_spohn,
)
from oneplap.solver import StepperConfig, run

# pipe flow


def test_exact_profile_values():
    spec = BinghamPipeSpec()
    np.testing.assert_allclose(bingham_exact_profile(np.array([0.0, 0.25, 0.5]), spec), 0.25, rtol=1e-15)
    assert bingham_exact_profile(np.array([1.0]), spec)[0] == 0.0
    # shear layer: f(R^2 - r^2)/4 - b1(R - r)
    assert bingham_exact_profile(np.array([0.75]), spec)[0] == pytest.approx((1 - 0.5625) - 0.25, rel=1e-15)


def test_exact_profile_without_yield_stress_is_poiseuille():
    spec = BinghamPipeSpec(b1=0.0, b2=2.0, f=3.0)
    r = np.linspace(0, 1, 11)
    np.testing.assert_allclose(bingham_exact_profile(r, spec), 3.0 * (1 - r * r) / 8.0, atol=1e-15)


def test_exact_profile_errors():
    with pytest.raises(DomainError):
        bingham_exact_profile(np.array([0.5]), BinghamPipeSpec(f=0.0))
    with pytest.raises(DomainError):
        bingham_exact_profile(np.array([1.5]), BinghamPipeSpec())


def test_sub_yield_forcing_leaves_fluid_at_rest():
    spec = BinghamPipeSpec(b1=3.0)
    eps = 1e-3
    res = run_bingham(spec, eps, 1 / 16, StepperConfig(dt=0.5))
    assert np.max(np.abs(res.final)) <= 10 * eps


def test_bingham_steady_state_quality(bingham64):
    res, _ = bingham64
    assert res.rel_linf <= 0.05
    assert res.steady_residual <= 10 * 1e-9
    assert res.anisotropy <= 1e-3
    g = res.problem.grid
    X, _ = g.coords()
    assert radial_anisotropy(g, res.exact) <= 1e-6
    assert radial_anisotropy(g, res.exact + 0.01 * X) >= 1e-3


# crystal relaxation


def test_spohn_zero_data_stays_zero():
    out = run_spohn(StepperConfig(dt=0.01), n=16, T=0.02, initial="zero")
    assert np.all(out.result.slab.values == 0.0)


def test_spohn_cone_grows_a_facet_and_dissipates():
    out = run_spohn(StepperConfig(dt=0.005), n=32, T=0.05)
    assert out.facet_areas[-1] > 0
    assert out.facet_areas[-1] > 10 * out.facet_areas[0]
    assert np.all(np.diff(out.energies) <= 1e-14 * out.energies[0])


def test_spohn_rejects_unknown_initial_data():
    with pytest.raises(DomainError):
        run_spohn(StepperConfig(dt=0.01), n=8, T=0.01, initial="pyramid")


# manufactured solutions


def test_forcing_of_quadratic_heat_solution():
    # u = x^2 + y^2 + t solves u_t - lap u = 1 - 4
    d = MollifiedDensity(DensityParams(2.0, 0.0, 1.0), 0.0)
    f = manufactured_forcing(lambda x, y, t: x * x + y * y + t, d)
    x = np.linspace(0, 1, 7)
    np.testing.assert_allclose(f(x, x[::-1], 0.3), -3.0, atol=1e-8)


def test_separable_heat_case_has_no_forcing():
    case = manufactured_case("separable-heat", n=8)
    assert case.problem.forcing_at(0.05).max() == 0.0
    X, Y = case.problem.grid.coords()
    np.testing.assert_allclose(case.oracle(0.1), math.exp(-0.2 * math.pi**2) * np.sin(math.pi * X) * np.sin(math.pi * Y))


def test_unknown_family_rejected():
    with pytest.raises(DomainError, match="unknown family"):
        manufactured_case("staircase")


def _final_error(family, n, dt, T=0.05, scheme="bdf2"):
    case = manufactured_case(family, n=n, T=T)
    res = run(case.problem, StepperConfig(dt=dt, scheme=scheme))
    return oracle_errors(case, res.slab)[1]


@pytest.mark.parametrize("family", ["smooth-bump", "traveling-ramp"])
def test_manufactured_spatial_order(family):
    errs = [_final_error(family, n, 1e-3) for n in (16, 32)]
    assert observed_order(errs)[0] >= 1.8


def test_traveling_ramp_first_order_in_time():
    errs = [_final_error("traveling-ramp", 64, dt, T=0.05, scheme="euler") for dt in (0.01, 0.005)]
    assert observed_order(errs)[0] >= 0.9


def test_traveling_ramp_truncated_gradient_stays_continuous():
    case = manufactured_case("traveling-ramp", n=64, T=0.1)
    res = run(case.problem, StepperConfig(dt=1e-3))
    G = truncated_slab(res.slab, 0.2, case.params["eps"])
    est = holder_fit(G, res.slab, ParabolicCylinder((0.5, 0.5), 0.1, 0.3), d_max=0.15)
    assert not est.flat
    assert 0 < est.alpha_hat <= 1.2


# regularization sweep


def test_sweep_validates_eps_list():
    b = bingham_builder(BinghamPipeSpec(), 1 / 8, 0.5)
    cfg = StepperConfig(dt=0.5)
    with pytest.raises(DomainError, match="strictly decreasing"):
        epsilon_sweep(b, [1e-2, 1e-2], cfg, 0.4)
    with pytest.raises(DomainError, match="delta/8"):
        epsilon_sweep(b, [0.1, 0.01], cfg, 0.4)


def test_sweep_is_deterministic_and_worker_independent():
    b = bingham_builder(BinghamPipeSpec(), 1 / 16, 1.0)
    cfg = StepperConfig(dt=0.25)
    a = epsilon_sweep(b, [4e-2, 2e-2, 1e-2], cfg, 0.4)
    c = epsilon_sweep(b, [4e-2, 2e-2, 1e-2], cfg, 0.4, workers=2)
    assert a.lp_dist == c.lp_dist and a.sup_trunc_dist == c.sup_trunc_dist
    assert len(a.rows()) == 3


def test_sweep_without_yield_stress_has_no_eps_dependence():
    # the quadratic flux of the surrogate does not see eps at all
    b = bingham_builder(BinghamPipeSpec(b1=0.0), 1 / 16, 1.0)
    res = epsilon_sweep(b, [4e-2, 2e-2, 1e-2], StepperConfig(dt=0.25), 0.4)
    assert max(res.lp_dist.values()) <= 1e-12


def test_single_eps_sweep_has_empty_table():
    b = bingham_builder(BinghamPipeSpec(), 1 / 8, 0.5)
    res = epsilon_sweep(b, [1e-2], StepperConfig(dt=0.5), 0.4)
    assert res.rows() == [] and res.cauchy_lp and res.cauchy_sup
