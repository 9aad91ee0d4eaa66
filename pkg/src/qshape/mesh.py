"""Uniform square-cell grid on a rectangular box, nodal fields, cell masks.

Every square cell is split into two fixed triangles (lower-left and
upper-right of the anti-diagonal), so piecewise-linear interpolants have
one constant gradient per triangle and all energies, band measures and
level-set lengths downstream are exact per-triangle quantities.

Node (i, j) sits at origin + (i*h, j*h); values arrays are indexed
[i, j] with shape (nx, ny).  Cells are indexed [ci, cj] with shape
(nx-1, ny-1).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np


class GridConfigError(ValueError):
    """Grid parameters cannot form a valid square-cell grid."""


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the discretization of the box D."""

    origin: tuple[float, float]
    extent: tuple[float, float]
    nx: int
    ny: int
    h: float

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def n_cells(self) -> int:
        return (self.nx - 1) * (self.ny - 1)

    @property
    def n_triangles(self) -> int:
        return 2 * self.n_cells

    @property
    def box_measure(self) -> float:
        return self.extent[0] * self.extent[1]

    def node_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Arrays X, Y of node coordinates, each shape (nx, ny)."""
        x = self.origin[0] + self.h * np.arange(self.nx)
        y = self.origin[1] + self.h * np.arange(self.ny)
        return np.meshgrid(x, y, indexing="ij")

    def boundary_node_mask(self) -> np.ndarray:
        """Boolean (nx, ny), True on the nodes of the box boundary."""
        b = np.zeros((self.nx, self.ny), dtype=bool)
        b[0, :] = b[-1, :] = True
        b[:, 0] = b[:, -1] = True
        return b


def make_grid(origin, extent, nx: int, ny: int) -> GridSpec:
    """Validate and build a GridSpec with square cells.

    Raises GridConfigError unless extent is positive, nx, ny >= 3 and
    extent[0]/(nx-1) == extent[1]/(ny-1) to within 1e-12 relative.
    """
    ox, oy = float(origin[0]), float(origin[1])
    ex, ey = float(extent[0]), float(extent[1])
    if ex <= 0 or ey <= 0:
        raise GridConfigError(f"extent must be positive, got ({ex}, {ey})")
    nx, ny = int(nx), int(ny)
    if nx < 3 or ny < 3:
        raise GridConfigError(f"need at least 3 nodes per axis, got ({nx}, {ny})")
    hx = ex / (nx - 1)
    hy = ey / (ny - 1)
    if abs(hx - hy) > 1e-12 * max(hx, hy):
        raise GridConfigError(
            f"cells must be square: spacing {hx} along x vs {hy} along y"
        )
    return GridSpec(origin=(ox, oy), extent=(ex, ey), nx=nx, ny=ny, h=hx)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Nodal values on a grid; boundary_zero marks zero trace on the box."""

    grid: GridSpec
    values: np.ndarray  # (nx, ny)
    boundary_zero: bool = False

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def at_node(self, i: int, j: int) -> float:
        return float(self.values[i, j])


def new_field(grid: GridSpec, values, boundary_zero: bool = False) -> ScalarField:
    """Wrap a values array (copied, frozen) as a ScalarField.

    With boundary_zero=True the boundary nodes must already be exactly 0.
    """
    v = np.array(values, dtype=float)
    if v.shape != (grid.nx, grid.ny):
        raise ValueError(f"values shape {v.shape} != grid shape {(grid.nx, grid.ny)}")
    if boundary_zero:
        b = grid.boundary_node_mask()
        if np.any(v[b] != 0.0):
            raise ValueError("boundary_zero field has nonzero boundary values")
    v.flags.writeable = False
    return ScalarField(grid=grid, values=v, boundary_zero=boundary_zero)


def zero_field(grid: GridSpec) -> ScalarField:
    return new_field(grid, np.zeros((grid.nx, grid.ny)), boundary_zero=True)


def field_from_function(grid: GridSpec, fn, boundary_zero: bool = False) -> ScalarField:
    """Sample fn(X, Y) at the nodes (fn vectorized over coordinate arrays)."""
    X, Y = grid.node_coords()
    return new_field(grid, fn(X, Y), boundary_zero=boundary_zero)


@dataclass(frozen=True, eq=False)
class DomainMask:
    """Boolean per-cell set of active cells: a candidate subdomain of D."""

    grid: GridSpec
    active: np.ndarray  # (nx-1, ny-1) bool

    def complement(self) -> "DomainMask":
        return DomainMask(self.grid, ~self.active)

    def intersect(self, other: "DomainMask") -> "DomainMask":
        _check_same_grid(self.grid, other.grid)
        return DomainMask(self.grid, self.active & other.active)

    def union(self, other: "DomainMask") -> "DomainMask":
        _check_same_grid(self.grid, other.grid)
        return DomainMask(self.grid, self.active | other.active)

    def symmetric_difference(self, other: "DomainMask") -> "DomainMask":
        _check_same_grid(self.grid, other.grid)
        return DomainMask(self.grid, self.active ^ other.active)

    def is_subset_of(self, other: "DomainMask") -> bool:
        return bool(np.all(~self.active | other.active))

    def cell_count(self) -> int:
        return int(np.count_nonzero(self.active))

    def digest(self) -> bytes:
        return np.packbits(self.active).tobytes()


def _check_same_grid(a: GridSpec, b: GridSpec) -> None:
    if a != b:
        raise ValueError("masks/fields live on different grids")


def new_mask(grid: GridSpec, active) -> DomainMask:
    a = np.array(active, dtype=bool)
    if a.shape != (grid.nx - 1, grid.ny - 1):
        raise ValueError(
            f"active shape {a.shape} != cell shape {(grid.nx - 1, grid.ny - 1)}"
        )
    a.flags.writeable = False
    return DomainMask(grid=grid, active=a)


def full_mask(grid: GridSpec) -> DomainMask:
    return new_mask(grid, np.ones((grid.nx - 1, grid.ny - 1), dtype=bool))


def empty_mask(grid: GridSpec) -> DomainMask:
    return new_mask(grid, np.zeros((grid.nx - 1, grid.ny - 1), dtype=bool))


def measure(m: DomainMask) -> float:
    """Lebesgue measure of the active cells: count times h^2."""
    return m.cell_count() * m.grid.h ** 2


# ---------------------------------------------------------------------------
# Triangulation: fixed split of each cell into a lower-left triangle
# (nodes (i,j), (i+1,j), (i,j+1)) and an upper-right triangle
# (nodes (i+1,j), (i+1,j+1), (i,j+1)).  Triangle 2*c is the lower one of
# flat cell c = ci*(ny-1) + cj.


class Triangulation:
    """Precomputed index arrays for all triangles of a grid.

    va, vb, vc: flat node ids of the three vertices per triangle.
    gx0, gx1, gy0, gy1: flat node ids such that the constant gradient of
    the linear interpolant is ((u[gx1]-u[gx0])/h, (u[gy1]-u[gy0])/h).
    mid: (n_tri, 2) triangle centroids.  cell: flat cell id per triangle.
    """

    def __init__(self, grid: GridSpec):
        nx, ny, h = grid.nx, grid.ny, grid.h
        ci, cj = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
        ci = ci.ravel()
        cj = cj.ravel()
        n00 = ci * ny + cj          # (i, j)
        n10 = (ci + 1) * ny + cj    # (i+1, j)
        n01 = ci * ny + (cj + 1)    # (i, j+1)
        n11 = (ci + 1) * ny + (cj + 1)

        nc = (nx - 1) * (ny - 1)
        self.grid = grid
        self.n_tri = 2 * nc
        self.area = h * h / 2.0

        def interleave(lo, up):
            out = np.empty(2 * nc, dtype=np.int64)
            out[0::2] = lo
            out[1::2] = up
            return out

        # vertex ids (A, B, C); lower: A=(i,j) B=(i+1,j) C=(i,j+1)
        # upper: A=(i+1,j) B=(i+1,j+1) C=(i,j+1)
        self.va = interleave(n00, n10)
        self.vb = interleave(n10, n11)
        self.vc = interleave(n01, n01)
        # gradient difference pairs
        self.gx0 = interleave(n00, n01)
        self.gx1 = interleave(n10, n11)
        self.gy0 = interleave(n00, n10)
        self.gy1 = interleave(n01, n11)

        ox, oy = grid.origin
        cx = ox + h * ci
        cy = oy + h * cj
        mid_lo = np.stack([cx + h / 3.0, cy + h / 3.0], axis=1)
        mid_up = np.stack([cx + 2.0 * h / 3.0, cy + 2.0 * h / 3.0], axis=1)
        self.mid = np.empty((2 * nc, 2))
        self.mid[0::2] = mid_lo
        self.mid[1::2] = mid_up

        self.cell = interleave(np.arange(nc), np.arange(nc))

    def vertex_values(self, values: np.ndarray):
        """Per-triangle vertex value triples (ua, ub, uc) from flat nodal values."""
        u = values.ravel()
        return u[self.va], u[self.vb], u[self.vc]

    def gradients(self, values: np.ndarray):
        """Per-triangle constant gradient components (gx, gy)."""
        u = values.ravel()
        inv_h = 1.0 / self.grid.h
        gx = (u[self.gx1] - u[self.gx0]) * inv_h
        gy = (u[self.gy1] - u[self.gy0]) * inv_h
        return gx, gy

    def node_areas(self) -> np.ndarray:
        """Lumped node areas (sum of incident triangle areas / 3), flat (n_nodes,)."""
        n = self.grid.n_nodes
        w = np.full(self.n_tri, self.area / 3.0)
        areas = np.bincount(self.va, weights=w, minlength=n)
        areas += np.bincount(self.vb, weights=w, minlength=n)
        areas += np.bincount(self.vc, weights=w, minlength=n)
        return areas


@functools.lru_cache(maxsize=64)
def triangulation(grid: GridSpec) -> Triangulation:
    return Triangulation(grid)


@dataclass(frozen=True, eq=False)
class CellGradientField:
    """Constant gradient per triangle of a piecewise-linear interpolant."""

    grid: GridSpec
    gx: np.ndarray  # (n_tri,)
    gy: np.ndarray  # (n_tri,)

    def norm(self) -> np.ndarray:
        return np.hypot(self.gx, self.gy)


def gradient(u: ScalarField) -> CellGradientField:
    """Exact gradient of the linear interpolant on each triangle."""
    tri = triangulation(u.grid)
    gx, gy = tri.gradients(u.values)
    return CellGradientField(grid=u.grid, gx=gx, gy=gy)


def integrate_cellwise(grid: GridSpec, samples: np.ndarray) -> float:
    """Midpoint quadrature: sum of per-triangle samples times triangle area."""
    samples = np.asarray(samples, dtype=float)
    tri = triangulation(grid)
    if samples.shape != (tri.n_tri,):
        raise ValueError(f"need one sample per triangle ({tri.n_tri}), got {samples.shape}")
    return float(samples.sum() * tri.area)


def interpolate(u: ScalarField, points: np.ndarray) -> np.ndarray:
    """Evaluate the piecewise-linear interpolant of u at points (n, 2).

    Points outside the box are clamped to it.  On the triangulation's own
    centroids this returns the vertex mean of the containing triangle.
    """
    g = u.grid
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    xi = np.clip((pts[:, 0] - g.origin[0]) / g.h, 0.0, g.nx - 1.0)
    eta = np.clip((pts[:, 1] - g.origin[1]) / g.h, 0.0, g.ny - 1.0)
    ci = np.minimum(xi.astype(np.int64), g.nx - 2)
    cj = np.minimum(eta.astype(np.int64), g.ny - 2)
    lx = xi - ci
    ly = eta - cj
    v = u.values
    u00 = v[ci, cj]
    u10 = v[ci + 1, cj]
    u01 = v[ci, cj + 1]
    u11 = v[ci + 1, cj + 1]
    lower = lx + ly <= 1.0
    out = np.where(
        lower,
        u00 * (1.0 - lx - ly) + u10 * lx + u01 * ly,
        u11 * (lx + ly - 1.0) + u10 * (1.0 - ly) + u01 * (1.0 - lx),
    )
    return out


# ---------------------------------------------------------------------------
# Mask/node relations.


def node_closure(m: DomainMask) -> np.ndarray:
    """Boolean (nx, ny): nodes with at least one incident active cell."""
    g = m.grid
    closure = np.zeros((g.nx, g.ny), dtype=bool)
    a = m.active
    closure[:-1, :-1] |= a
    closure[1:, :-1] |= a
    closure[:-1, 1:] |= a
    closure[1:, 1:] |= a
    return closure


def interior_nodes(m: DomainMask) -> np.ndarray:
    """Boolean (nx, ny): nodes all of whose incident cells are active.

    Nodes on the box boundary are never interior (they miss cells), so a
    field supported on these nodes vanishes identically on every inactive
    cell: the discrete zero-trace space of the open set the mask represents.
    """
    g = m.grid
    padded = np.zeros((g.nx + 1, g.ny + 1), dtype=bool)
    padded[1:-1, 1:-1] = m.active
    return (
        padded[:-1, :-1] & padded[1:, :-1] & padded[:-1, 1:] & padded[1:, 1:]
    )


def restrict(u: ScalarField, m: DomainMask) -> ScalarField:
    """Zero u at every node none of whose incident cells is active."""
    _check_same_grid(u.grid, m.grid)
    keep = node_closure(m)
    v = np.where(keep, u.values, 0.0)
    return new_field(u.grid, v, boundary_zero=u.boundary_zero)


def boundary_cells(m: DomainMask) -> np.ndarray:
    """Boolean (nx-1, ny-1): active cells edge-adjacent to inactive or to the box edge."""
    g = m.grid
    padded = np.zeros((g.nx + 1, g.ny + 1), dtype=bool)
    padded[1:-1, 1:-1] = m.active
    inner = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m.active & ~inner


def adjacent_inactive_cells(m: DomainMask) -> np.ndarray:
    """Boolean (nx-1, ny-1): inactive cells edge-adjacent to an active cell."""
    g = m.grid
    padded = np.zeros((g.nx + 1, g.ny + 1), dtype=bool)
    padded[1:-1, 1:-1] = m.active
    touch = (
        padded[:-2, 1:-1] | padded[2:, 1:-1] | padded[1:-1, :-2] | padded[1:-1, 2:]
    )
    return touch & ~m.active


# ---------------------------------------------------------------------------
# Shape constructors.  Cells activate when any of their four corners lies in
# the shape, which makes the interior-node set of the mask coincide with the
# nodes inside the shape: benchmark solves then see a zero-mean staircase of
# the true boundary instead of a systematically shrunk domain.


def _corner_test(grid: GridSpec, inside) -> np.ndarray:
    X, Y = grid.node_coords()
    node_in = inside(X, Y)
    return (
        node_in[:-1, :-1] | node_in[1:, :-1] | node_in[:-1, 1:] | node_in[1:, 1:]
    )


def disc_mask(grid: GridSpec, center=(0.0, 0.0), radius: float = 1.0) -> DomainMask:
    cx, cy = center
    return new_mask(
        grid, _corner_test(grid, lambda X, Y: (X - cx) ** 2 + (Y - cy) ** 2 < radius**2)
    )


def annulus_mask(
    grid: GridSpec, center=(0.0, 0.0), outer: float = 1.0, inner: float = 0.3
) -> DomainMask:
    cx, cy = center

    def in_annulus(X, Y):
        r2 = (X - cx) ** 2 + (Y - cy) ** 2
        return (r2 < outer**2) & (r2 > inner**2)

    return new_mask(grid, _corner_test(grid, in_annulus))


def rect_mask(grid: GridSpec, lo, hi) -> DomainMask:
    x0, y0 = lo
    x1, y1 = hi

    def in_rect(X, Y):
        return (X > x0) & (X < x1) & (Y > y0) & (Y < y1)

    return new_mask(grid, _corner_test(grid, in_rect))


def slit_square_mask(grid: GridSpec, lo, hi, slit_ci: int | None = None) -> DomainMask:
    """Axis-aligned square of cells minus one vertical line of removed cells.

    The slit column (cell index slit_ci, default the middle of the square)
    is removed over the central half of the square's vertical extent, leaving
    a domain whose complement contains a segment: the prototype of a target
    that is not open.
    """
    base = rect_mask(grid, lo, hi)
    a = np.array(base.active)
    cols = np.flatnonzero(a.any(axis=1))
    rows = np.flatnonzero(a.any(axis=0))
    if cols.size == 0:
        return base
    if slit_ci is None:
        slit_ci = int(cols[len(cols) // 2])
    j0 = int(rows[0] + len(rows) // 4)
    j1 = int(rows[0] + (3 * len(rows)) // 4)
    a[slit_ci, j0:j1] = False
    return new_mask(grid, a)


# ---------------------------------------------------------------------------
# Plain-text dumps: one header line, then row-major values (one grid row of
# nodes per line) with 17 significant digits; masks dump 0/1 per cell.


def _header(grid: GridSpec, kind: str) -> str:
    o = grid.origin
    return (
        f"{kind} nx={grid.nx} ny={grid.ny} "
        f"ox={o[0]:.17g} oy={o[1]:.17g} h={grid.h:.17g}"
    )


def _parse_header(line: str, kind: str) -> GridSpec:
    parts = line.split()
    if not parts or parts[0] != kind:
        raise ValueError(f"expected a {kind} dump, got header {line!r}")
    kv = dict(p.split("=", 1) for p in parts[1:])
    nx, ny = int(kv["nx"]), int(kv["ny"])
    h = float(kv["h"])
    origin = (float(kv["ox"]), float(kv["oy"]))
    return make_grid(origin, ((nx - 1) * h, (ny - 1) * h), nx, ny)


def dump_field(u: ScalarField, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(_header(u.grid, "field") + "\n")
        for i in range(u.grid.nx):
            fh.write(" ".join(f"{v:.17g}" for v in u.values[i, :]) + "\n")


def load_field(path) -> ScalarField:
    with open(path, "r", encoding="ascii") as fh:
        grid = _parse_header(fh.readline().strip(), "field")
        rows = [
            np.array(fh.readline().split(), dtype=float) for _ in range(grid.nx)
        ]
    values = np.vstack(rows)
    b = grid.boundary_node_mask()
    return new_field(grid, values, boundary_zero=bool(np.all(values[b] == 0.0)))


def dump_mask(m: DomainMask, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(_header(m.grid, "mask") + "\n")
        for i in range(m.grid.nx - 1):
            fh.write("".join("1" if a else "0" for a in m.active[i, :]) + "\n")


def load_mask(path) -> DomainMask:
    with open(path, "r", encoding="ascii") as fh:
        grid = _parse_header(fh.readline().strip(), "mask")
        rows = []
        for _ in range(grid.nx - 1):
            rows.append([c == "1" for c in fh.readline().strip()])
    return new_mask(grid, np.array(rows, dtype=bool))
