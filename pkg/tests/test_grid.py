import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oneplap.grid import (
    DomainError,
    Grid,
    ParabolicCylinder,
    ScalarField,
    TimeSlab,
    VectorField,
    cylinder_average,
    cylinder_nodes,
    d_p,
    divergence,
    fits_in,
    gradient,
    inner_edges,
    inner_nodes,
    nodal_gradient,
    read_slab_csv,
    slab_to_csv,
    write_slab_csv,
)


def _field(g, fn):
    X, Y = g.coords()
    return ScalarField(g, fn(X, Y))


def test_gradient_exact_on_affine():
    g = Grid.unit_square(10)
    F = gradient(_field(g, lambda x, y: 1.5 * x - 0.25 * y + 2))
    np.testing.assert_allclose(F.x, 1.5, rtol=1e-12)
    np.testing.assert_allclose(F.y, -0.25, rtol=1e-12)
    Z = gradient(_field(g, lambda x, y: 0 * x + 3.0))
    assert np.all(Z.x == 0) and np.all(Z.y == 0)


def test_gradient_of_square_at_midpoints():
    g = Grid.unit_square(8)
    F = gradient(_field(g, lambda x, y: x * x))
    X, _ = g.coords()
    xm = 0.5 * (X[1:, :] + X[:-1, :])
    np.testing.assert_allclose(F.x, 2 * xm, atol=1e-13)


def test_divergence_of_affine_gradient_vanishes():
    g = Grid.unit_square(12)
    d = divergence(gradient(_field(g, lambda x, y: 0.3 * x + 0.7 * y)))
    assert np.max(np.abs(d.values[g.interior])) < 1e-12


def test_five_point_laplacian_on_quadratic():
    g = Grid.unit_square(16)
    d = divergence(gradient(_field(g, lambda x, y: x * x + y * y)))
    np.testing.assert_allclose(d.values[g.interior], 4.0, rtol=1e-10)


def test_summation_by_parts_random_pairs():
    rng = np.random.default_rng(0)
    for trial in range(100):
        g = Grid.disk(1.0, 0.1) if trial % 2 else Grid.unit_square(9)
        v = ScalarField(g, np.where(g.interior, rng.normal(size=g.shape), 0.0))
        F = VectorField(g, rng.normal(size=(g.nx - 1, g.ny)), rng.normal(size=(g.nx, g.ny - 1)))
        lhs = inner_nodes(divergence(F), v) + inner_edges(F, gradient(v))
        scale = abs(inner_edges(F, gradient(v))) + 1.0
        assert abs(lhs) <= 1e-12 * scale


def test_disk_area_within_quantization():
    for h in (0.1, 0.05, 0.02):
        g = Grid.disk(1.0, h)
        assert abs(g.interior_area() - math.pi) <= 2 * h * 2 * math.pi
    with pytest.raises(DomainError):
        Grid.rectangle(4, 4, 0.0)


def test_nodal_gradient_central_difference():
    g = Grid.unit_square(10)
    grads = nodal_gradient(_field(g, lambda x, y: x * x + 3 * y))
    X, _ = g.coords()
    np.testing.assert_allclose(grads[1:-1, 1:-1, 0], 2 * X[1:-1, 1:-1], atol=1e-12)
    np.testing.assert_allclose(grads[1:-1, 1:-1, 1], 3.0, atol=1e-12)


def test_parabolic_distance_examples():
    assert d_p([0.2, 0.1, 0.5], [0.2, 0.1, 0.5]) == 0.0
    assert d_p([0, 0, 0.0], [0, 0, 0.04]) == pytest.approx(0.2, abs=1e-15)
    assert d_p([0, 0, 0.0], [0.3, 0, 0.04]) == pytest.approx(0.3, abs=1e-15)


def test_parabolic_distance_triangle_inequality():
    rng = np.random.default_rng(1)
    a, b, c = (rng.uniform(-1, 1, (100_000, 3)) for _ in range(3))
    assert np.all(d_p(a, c) <= d_p(a, b) + d_p(b, c) + 1e-12)


def _slab(g, fn, times):
    X, Y = g.coords()
    return TimeSlab(g, times, np.stack([fn(X, Y, t) for t in times]))


def test_cylinder_average_of_constant():
    g = Grid.unit_square(20)
    s = _slab(g, lambda x, y, t: 0 * x + 2.5, np.linspace(0, 0.1, 11))
    Q = ParabolicCylinder((0.5, 0.5), 0.1, 0.2)
    assert cylinder_average(s, Q, s.values) == pytest.approx(2.5, rel=1e-15)


def test_cylinder_half_space_indicator():
    g = Grid.unit_square(40)
    s = _slab(g, lambda x, y, t: (x > 0.5).astype(float), np.linspace(0, 0.1, 11))
    Q = ParabolicCylinder((0.5, 0.5), 0.1, 0.2)
    nodes = cylinder_nodes(s, Q)
    on_line = np.count_nonzero(np.isclose(g.coords()[0][nodes.ii, nodes.jj], 0.5))
    avg = cylinder_average(s, Q, s.values)
    assert abs(avg - 0.5) <= on_line / nodes.n_nodes


def test_cylinder_average_converges_to_point_value():
    g = Grid.unit_square(64)
    s = _slab(g, lambda x, y, t: np.sin(x) * np.cos(y) + t, np.linspace(0, 0.2, 801))
    x0, t0 = (0.5, 0.5), 0.2
    exact = math.sin(0.5) * math.cos(0.5) + t0
    errs = [abs(cylinder_average(s, ParabolicCylinder(x0, t0, r), s.values) - exact) for r in (0.2, 0.1, 0.05)]
    assert errs[0] > errs[1] > errs[2]


def test_cylinder_half_open_in_time():
    g = Grid.unit_square(10)
    s = _slab(g, lambda x, y, t: 0 * x + t, np.array([0.0, 0.01, 0.02, 0.03, 0.04]))
    nodes = cylinder_nodes(s, ParabolicCylinder((0.5, 0.5), 0.04, 0.2))
    # (0.04 - 0.04, 0.04] excludes t = 0
    np.testing.assert_array_equal(nodes.slices, [1, 2, 3, 4])


def test_empty_cylinder_reports_counts():
    g = Grid.unit_square(10)
    s = _slab(g, lambda x, y, t: 0 * x, np.array([0.0, 0.1]))
    with pytest.raises(DomainError, match="holds"):
        cylinder_nodes(s, ParabolicCylinder((0.5, 0.5), 0.1, 0.01))


def test_fits_in():
    g = Grid.disk(1.0, 0.05)
    s = _slab(g, lambda x, y, t: 0 * x, np.linspace(0, 1, 11))
    assert fits_in(s, ParabolicCylinder((0.0, 0.0), 1.0, 0.5))
    assert not fits_in(s, ParabolicCylinder((0.9, 0.0), 1.0, 0.5))
    assert not fits_in(s, ParabolicCylinder((0.0, 0.0), 0.1, 0.5))


def test_csv_round_trip_bit_exact():
    g = Grid.disk(1.0, 0.125)
    rng = np.random.default_rng(3)
    s = TimeSlab(g, np.array([0.0, 1 / 3, 2 / 3]), rng.normal(size=(3,) + g.shape) * 1e-7)
    text = slab_to_csv(s)
    assert text.splitlines()[0] == "x,y,t,value"
    back = read_slab_csv(io.StringIO(text), g)
    np.testing.assert_array_equal(back.values, s.values)
    np.testing.assert_array_equal(back.times, s.times)
    buf = io.StringIO()
    write_slab_csv(back, buf)
    assert buf.getvalue() == text


def test_timeslab_rejects_nonuniform_times():
    g = Grid.unit_square(4)
    with pytest.raises(ValueError):
        TimeSlab(g, [0.0, 0.1, 0.3], np.zeros((3,) + g.shape))


def test_broadcast_slab_keeps_broadcast_gradients():
    g = Grid.unit_square(8)
    u = np.random.default_rng(0).normal(size=g.shape)
    s = TimeSlab(g, np.arange(5) * 0.1, np.broadcast_to(u, (5,) + g.shape))
    gr = s.nodal_gradients()
    assert gr.strides[0] == 0
    np.testing.assert_array_equal(gr[3], nodal_gradient(ScalarField(g, u)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.2, 0.1]))
def test_property_adjointness(seed, h):
    rng = np.random.default_rng(seed)
    g = Grid.disk(1.0, h)
    v = ScalarField(g, np.where(g.interior, rng.normal(size=g.shape), 0.0))
    F = VectorField(g, rng.normal(size=(g.nx - 1, g.ny)), rng.normal(size=(g.nx, g.ny - 1)))
    a = inner_nodes(divergence(F), v)
    b = inner_edges(F, gradient(v))
    assert abs(a + b) <= 1e-12 * (abs(b) + 1)
