"""Uniform 2-D grids, staggered difference calculus, time slabs and cylinders.

Node ``(i, j)`` sits at ``origin + h*(i, j)``; arrays are indexed ``[i, j]``
so axis 0 runs along x.  x-edges join ``(i, j)`` and ``(i+1, j)``; y-edges
join ``(i, j)`` and ``(i, j+1)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

INTERIOR, BOUNDARY, EXTERIOR = 0, 1, 2


class DomainError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Grid:
    nx: int
    ny: int
    h: float
    origin: tuple = (0.0, 0.0)
    mask: np.ndarray = field(default=None, repr=False)
    shape_name: str = "rectangle"
    radius: float | None = None
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.h > 0:
            raise DomainError("grid spacing must be positive")
        if self.mask is None:
            m = np.full((self.nx, self.ny), BOUNDARY, dtype=np.int8)
            m[1:-1, 1:-1] = INTERIOR
            object.__setattr__(self, "mask", m)
        self.mask.setflags(write=False)

    @classmethod
    def rectangle(cls, nx, ny, h, origin=(0.0, 0.0)):
        return cls(nx, ny, h, tuple(map(float, origin)))

    @classmethod
    def unit_square(cls, n):
        """n cells per side, (n+1)^2 nodes on [0,1]^2."""
        return cls.rectangle(n + 1, n + 1, 1.0 / n)

    @classmethod
    def disk(cls, R, h, center=(0.0, 0.0), interior_radius=None):
        """Masked square covering the disk; nodes with |x - c| < R are unknowns.

        The boundary ring holds every non-interior node sharing a grid cell
        with an interior node, so each cell touching an unknown is complete.
        """
        n = int(math.ceil(R / h - 1e-9)) + 2
        nx = 2 * n + 1
        origin = (center[0] - n * h, center[1] - n * h)
        idx = np.arange(nx) - n
        X, Y = np.meshgrid(idx * h, idx * h, indexing="ij")
        rr = np.hypot(X, Y)
        cutoff = R if interior_radius is None else interior_radius
        inner = rr < cutoff - 1e-12 * R
        near = np.zeros_like(inner)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                near |= np.roll(np.roll(inner, di, 0), dj, 1)
        mask = np.full((nx, nx), EXTERIOR, dtype=np.int8)
        mask[near] = BOUNDARY
        mask[inner] = INTERIOR
        return cls(nx, nx, h, origin, mask, "disk", float(R), tuple(map(float, center)))

    @property
    def shape(self):
        return (self.nx, self.ny)

    def coords(self):
        i = np.arange(self.nx)
        j = np.arange(self.ny)
        X, Y = np.meshgrid(self.origin[0] + i * self.h, self.origin[1] + j * self.h, indexing="ij")
        return X, Y

    @property
    def interior(self):
        return self.mask == INTERIOR

    @property
    def active(self):
        return self.mask != EXTERIOR

    def interior_area(self):
        return float(np.count_nonzero(self.interior)) * self.h**2

    def node_index(self, x):
        """Nearest node indices to a point."""
        i = int(round((x[0] - self.origin[0]) / self.h))
        j = int(round((x[1] - self.origin[1]) / self.h))
        return i, j

    def same_layout(self, other):
        return (
            self.nx == other.nx
            and self.ny == other.ny
            and self.h == other.h
            and self.origin == other.origin
            and np.array_equal(self.mask, other.mask)
        )


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError(f"field shape {self.values.shape} does not match grid {self.grid.shape}")


@dataclass(frozen=True, eq=False)
class VectorField:
    """Edge-centred vector field: ``x`` on x-edges (nx-1, ny), ``y`` on y-edges (nx, ny-1).

    Edges touching an exterior node are masked out and hold zeros.
    """

    grid: Grid
    x: np.ndarray
    y: np.ndarray

    def edge_masks(self):
        return edge_masks(self.grid)

    def at_nodes(self):
        """Average of adjacent edges per node, shape (nx, ny, 2).

        At interior nodes this is the central difference of the underlying
        scalar; at boundary nodes a one-sided difference.
        """
        mx, my = self.edge_masks()
        out = np.zeros(self.grid.shape + (2,))
        for comp, arr, m, axis in ((0, self.x, mx, 0), (1, self.y, my, 1)):
            s = np.zeros(self.grid.shape)
            c = np.zeros(self.grid.shape)
            lo = [slice(None)] * 2
            hi = [slice(None)] * 2
            lo[axis] = slice(0, -1)
            hi[axis] = slice(1, None)
            s[tuple(lo)] += np.where(m, arr, 0.0)
            c[tuple(lo)] += m
            s[tuple(hi)] += np.where(m, arr, 0.0)
            c[tuple(hi)] += m
            out[..., comp] = np.where(c > 0, s / np.maximum(c, 1), 0.0)
        return out


def edge_masks(grid):
    a = grid.active
    return a[:-1, :] & a[1:, :], a[:, :-1] & a[:, 1:]


def gradient(u):
    g = u.grid
    mx, my = edge_masks(g)
    v = u.values
    gx = np.where(mx, (v[1:, :] - v[:-1, :]) / g.h, 0.0)
    gy = np.where(my, (v[:, 1:] - v[:, :-1]) / g.h, 0.0)
    return VectorField(g, gx, gy)


def divergence(F):
    """Backward-difference divergence at interior nodes (zero elsewhere).

    Adjoint to ``-gradient`` for the node/edge inner products weighted by
    h^2 when the scalar vanishes off the interior.
    """
    g = F.grid
    h = g.h
    mx, my = edge_masks(g)
    fx = np.where(mx, F.x, 0.0)
    fy = np.where(my, F.y, 0.0)
    d = np.zeros(g.shape)
    d[:-1, :] += fx
    d[1:, :] -= fx
    d[:, :-1] += fy
    d[:, 1:] -= fy
    return ScalarField(g, np.where(g.interior, d / h, 0.0))


def inner_nodes(a, b):
    return float(a.grid.h**2 * np.sum(a.values * b.values))


def inner_edges(F, G):
    mx, my = edge_masks(F.grid)
    h2 = F.grid.h**2
    return float(h2 * (np.sum(np.where(mx, F.x * G.x, 0.0)) + np.sum(np.where(my, F.y * G.y, 0.0))))


def nodal_gradient(u):
    """Central-difference gradient at nodes, array (nx, ny, 2)."""
    return gradient(u).at_nodes()


# ---------------------------------------------------------------------------
# space-time


def d_p(X1, X2):
    """Parabolic distance max(|x - y|, sqrt|t - s|) between (x, y, t) points."""
    X1 = np.asarray(X1, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    dx = np.hypot(X1[..., 0] - X2[..., 0], X1[..., 1] - X2[..., 1])
    return np.maximum(dx, np.sqrt(np.abs(X1[..., 2] - X2[..., 2])))


@dataclass(frozen=True)
class ParabolicCylinder:
    """B_r(x0) x (t0 - r^2, t0]."""

    center: tuple
    t0: float
    r: float

    def scaled(self, factor):
        return ParabolicCylinder(self.center, self.t0, self.r * factor)


class TimeSlab:
    """Uniformly spaced time slices of scalar fields on one grid."""

    def __init__(self, grid, times, values):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.shape != (times.size,) + grid.shape:
            raise ValueError("slab values must have shape (n_times, nx, ny)")
        if times.size > 1:
            dts = np.diff(times)
            if np.any(dts <= 0):
                raise ValueError("times must be strictly increasing")
            if np.max(np.abs(dts - dts[0])) > 1e-12 * max(abs(dts[0]), abs(times[-1])):
                raise ValueError("time steps must be uniform")
        self.grid = grid
        self.times = times
        self.values = values
        self._grads = None

    def __len__(self):
        return self.times.size

    @property
    def dt(self):
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    def field(self, m):
        return ScalarField(self.grid, self.values[m])

    def nodal_gradients(self):
        """Cached central-difference gradients, shape (n_times, nx, ny, 2)."""
        if self._grads is None:
            if self.values.strides[0] == 0:
                # steady slab stored as one broadcast slice
                one = nodal_gradient(self.field(0))
                self._grads = np.broadcast_to(one, (len(self),) + one.shape)
            else:
                self._grads = np.stack([nodal_gradient(self.field(m)) for m in range(len(self))])
        return self._grads

    def tail(self, n):
        return TimeSlab(self.grid, self.times[-n:], self.values[-n:])


@dataclass(frozen=True)
class CylinderNodes:
    """Index sets of a cylinder: spatial node indices and slice indices."""

    ii: np.ndarray
    jj: np.ndarray
    slices: np.ndarray

    @property
    def n_nodes(self):
        return self.ii.size

    @property
    def n_samples(self):
        return self.ii.size * self.slices.size


def cylinder_nodes(slab, Q, min_nodes=4, min_slices=2):
    """Non-exterior nodes with centre in B_r(x0) and slices in (t0 - r^2, t0]."""
    g = slab.grid
    X, Y = g.coords()
    inside = (np.hypot(X - Q.center[0], Y - Q.center[1]) <= Q.r * (1 + 1e-12)) & g.active
    ii, jj = np.nonzero(inside)
    tol = 1e-12 * max(1.0, abs(Q.t0))
    t = slab.times
    sl = np.flatnonzero((t > Q.t0 - Q.r**2 + tol) & (t <= Q.t0 + tol))
    if ii.size < min_nodes or sl.size < min_slices:
        raise DomainError(
            f"cylinder r={Q.r} at {Q.center}, t0={Q.t0} holds {ii.size} nodes and "
            f"{sl.size} slices (need {min_nodes} and {min_slices})"
        )
    return CylinderNodes(ii, jj, sl)


def cylinder_values(slab, Q, quantity, **kw):
    """Samples of a per-point quantity over the cylinder, shape (n_slices, n_nodes, ...).

    ``quantity`` is either an array shaped like the slab (leading time axis
    then nx, ny, ...) or a callable ``quantity(slab) -> such an array``.
    """
    nodes = cylinder_nodes(slab, Q, **kw)
    arr = quantity(slab) if callable(quantity) else quantity
    return arr[nodes.slices[:, None], nodes.ii, nodes.jj]


def cylinder_average(slab, Q, quantity, **kw):
    vals = cylinder_values(slab, Q, quantity, **kw)
    return vals.reshape((-1,) + vals.shape[2:]).mean(axis=0)


def fits_in(slab, Q):
    """Whether B_r(x0) lies inside the active region and (t0-r^2, t0] inside the slab."""
    g = slab.grid
    X, Y = g.coords()
    ball = np.hypot(X - Q.center[0], Y - Q.center[1]) <= Q.r
    if not np.all(g.active[ball]):
        return False
    return slab.times[0] <= Q.t0 - Q.r**2 + 1e-12 and Q.t0 <= slab.times[-1] + 1e-12


# ---------------------------------------------------------------------------
# CSV I/O: header x,y,t,value; one block per slice, nodes row-major (i outer)


def write_slab_csv(slab, fh):
    g = slab.grid
    X, Y = g.coords()
    xs = [repr(float(v)) for v in X.ravel()]
    ys = [repr(float(v)) for v in Y.ravel()]
    fh.write("x,y,t,value\n")
    for m, t in enumerate(slab.times):
        ts = f"{t:.17g}"
        vals = slab.values[m].ravel()
        fh.write("".join(f"{x},{y},{ts},{v:.17g}\n" for x, y, v in zip(xs, ys, vals)))


def slab_to_csv(slab):
    buf = io.StringIO()
    write_slab_csv(slab, buf)
    return buf.getvalue()


def read_slab_csv(fh, grid):
    """Read a slab written by ``write_slab_csv`` onto a known grid."""
    reader = csv.reader(fh)
    header = next(reader)
    if header != ["x", "y", "t", "value"]:
        raise ValueError(f"unexpected CSV header {header}")
    rows = np.array([[float(c) for c in row] for row in reader if row])
    n = grid.nx * grid.ny
    if rows.shape[0] % n:
        raise ValueError("row count is not a whole number of slices")
    m = rows.shape[0] // n
    times = rows[::n, 2]
    values = rows[:, 3].reshape(m, grid.nx, grid.ny)
    return TimeSlab(grid, times, values)
