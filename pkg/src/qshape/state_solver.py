"""Inner minimization on a fixed mask, torsion functions, eigenvalue estimate.

The energy of a nodal field u over the active cells of a mask is assembled
with one-point (centroid) quadrature per triangle:

    E(u) = sum over active triangles of f(centroid, vertex mean, grad) * area

and minimized by nonlinear conjugate gradient (Polak-Ribiere with periodic
restart) over the interior nodes of the mask, i.e. the nodes all of whose
incident cells are active.  Fields in this space vanish identically on every
inactive cell, which is what makes the energy comparison chains between masks
exact at the discrete level.  For p != 2 the |z|^p term is regularized as
(|z|^2 + delta^2)^(p/2) - delta^p with delta driven down by continuation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from qshape.integrand import IntegrandSpec, dirichlet_energy
from qshape.mesh import (
    DomainMask,
    GridSpec,
    ScalarField,
    full_mask,
    interior_nodes,
    new_field,
    triangulation,
)

DELTA_SCHEDULE = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


class SolverError(RuntimeError):
    pass


class UnboundedEnergyError(SolverError):
    """Energy fell through the declared floor: the integrand is not coercive."""


class EigenSolveError(SolverError):
    def __init__(self, message: str, last_quotient: float):
        super().__init__(message)
        self.last_quotient = last_quotient


@dataclass(frozen=True)
class SolveReport:
    energy: float
    iterations: int
    final_gradient_norm: float
    converged: bool
    regularization_delta: float = 0.0


class EnergyAssembler:
    """Vectorized energy/gradient of an integrand over a mask's triangles."""

    def __init__(self, grid: GridSpec, mask: Optional[DomainMask] = None):
        tri = triangulation(grid)
        if mask is None:
            sel = None
            free = ~grid.boundary_node_mask()
        else:
            tri_active = np.repeat(mask.active.ravel(), 2)
            sel = np.flatnonzero(tri_active)
            free = interior_nodes(mask)
        self.grid = grid
        self.area = tri.area
        self.inv_h = 1.0 / grid.h
        if sel is None:
            self.va, self.vb, self.vc = tri.va, tri.vb, tri.vc
            self.gx0, self.gx1 = tri.gx0, tri.gx1
            self.gy0, self.gy1 = tri.gy0, tri.gy1
            self.mid = tri.mid
        else:
            self.va, self.vb, self.vc = tri.va[sel], tri.vb[sel], tri.vc[sel]
            self.gx0, self.gx1 = tri.gx0[sel], tri.gx1[sel]
            self.gy0, self.gy1 = tri.gy0[sel], tri.gy1[sel]
            self.mid = tri.mid[sel]
        self.n_tri = len(self.va)
        self.free_mask = free
        self.free_ids = np.flatnonzero(free.ravel())
        self.n_free = len(self.free_ids)
        self.n_nodes = grid.n_nodes

    def full_from_free(self, x: np.ndarray) -> np.ndarray:
        u = np.zeros(self.n_nodes)
        u[self.free_ids] = x
        return u

    def source_vertex(self, spec: IntegrandSpec):
        """Per-triangle vertex samples of a nodal source, or None.

        Nodal sources are integrated with the vertex rule; the correction
        relative to the centroid rule (which the pointwise integrand would
        give through linear interpolation) is gbar*mean(u) - mean(g*u) per
        triangle.
        """
        if spec.nodal_source is None:
            return None
        if spec.nodal_source.grid != self.grid:
            raise ValueError("nodal source lives on a different grid")
        gflat = spec.nodal_source.values.ravel()
        ga, gb, gc = gflat[self.va], gflat[self.vb], gflat[self.vc]
        return ga, gb, gc, (ga + gb + gc) / 3.0

    def terms(self, u: np.ndarray):
        s = (u[self.va] + u[self.vb] + u[self.vc]) / 3.0
        gx = (u[self.gx1] - u[self.gx0]) * self.inv_h
        gy = (u[self.gy1] - u[self.gy0]) * self.inv_h
        return s, np.stack([gx, gy], axis=1)

    def integrand_values(self, spec: IntegrandSpec, u: np.ndarray):
        """Per-triangle corrected integrand values F plus (s, z, source)."""
        s, z = self.terms(u)
        F = spec.eval(self.mid, s, z)
        src = self.source_vertex(spec)
        if src is not None:
            ga, gb, gc, gbar = src
            F = F + gbar * s - (ga * u[self.va] + gb * u[self.vb] + gc * u[self.vc]) / 3.0
        return F, s, z, src

    def energy(self, spec: IntegrandSpec, u: np.ndarray) -> float:
        if self.n_tri == 0:
            return 0.0
        F, _, _, _ = self.integrand_values(spec, u)
        return float(F.sum() * self.area)

    def grad_nodes(self, spec: IntegrandSpec, u: np.ndarray) -> np.ndarray:
        """Gradient of the energy with respect to every nodal value (flat)."""
        if self.n_tri == 0:
            return np.zeros(self.n_nodes)
        s, z = self.terms(u)
        ds = spec.d_s(self.mid, s, z)
        wz = spec.d_z(self.mid, s, z) * (self.area * self.inv_h)
        src = self.source_vertex(spec)
        if src is None:
            wa = wb = wc = ds * (self.area / 3.0)
        else:
            ga, gb, gc, gbar = src
            wa = (ds + gbar - ga) * (self.area / 3.0)
            wb = (ds + gbar - gb) * (self.area / 3.0)
            wc = (ds + gbar - gc) * (self.area / 3.0)
        g = np.bincount(self.va, weights=wa, minlength=self.n_nodes)
        g += np.bincount(self.vb, weights=wb, minlength=self.n_nodes)
        g += np.bincount(self.vc, weights=wc, minlength=self.n_nodes)
        g += np.bincount(self.gx1, weights=wz[:, 0], minlength=self.n_nodes)
        g -= np.bincount(self.gx0, weights=wz[:, 0], minlength=self.n_nodes)
        g += np.bincount(self.gy1, weights=wz[:, 1], minlength=self.n_nodes)
        g -= np.bincount(self.gy0, weights=wz[:, 1], minlength=self.n_nodes)
        return g

    def value_and_grad(self, spec: IntegrandSpec) -> Callable:
        def fg(x: np.ndarray):
            if self.n_tri == 0:
                return 0.0, np.zeros(0)
            u = self.full_from_free(x)
            F, s, z, src = self.integrand_values(spec, u)
            f = float(F.sum() * self.area)
            ds = spec.d_s(self.mid, s, z)
            wz = spec.d_z(self.mid, s, z) * (self.area * self.inv_h)
            if src is None:
                wa = wb = wc = ds * (self.area / 3.0)
            else:
                ga, gb, gc, gbar = src
                wa = (ds + gbar - ga) * (self.area / 3.0)
                wb = (ds + gbar - gb) * (self.area / 3.0)
                wc = (ds + gbar - gc) * (self.area / 3.0)
            g = np.bincount(self.va, weights=wa, minlength=self.n_nodes)
            g += np.bincount(self.vb, weights=wb, minlength=self.n_nodes)
            g += np.bincount(self.vc, weights=wc, minlength=self.n_nodes)
            g += np.bincount(self.gx1, weights=wz[:, 0], minlength=self.n_nodes)
            g -= np.bincount(self.gx0, weights=wz[:, 0], minlength=self.n_nodes)
            g += np.bincount(self.gy1, weights=wz[:, 1], minlength=self.n_nodes)
            g -= np.bincount(self.gy0, weights=wz[:, 1], minlength=self.n_nodes)
            return f, g[self.free_ids]

        return fg


def ncg_minimize(
    fg: Callable,
    x0: np.ndarray,
    tol: float,
    max_iter: int,
    restart: int = 50,
    energy_floor: Optional[float] = None,
    callback: Optional[Callable] = None,
):
    """Polak-Ribiere nonlinear CG with a curvature-seeded backtracking search.

    The first trial step of each line search comes from a secant estimate of
    the directional curvature, so on quadratic energies the search degenerates
    to exact linear CG.  Returns (x, iterations, grad_inf_norm, converged).
    """
    x = np.array(x0, dtype=float)
    if x.size == 0:
        return x, 0, 0.0, True
    f, g = fg(x)
    d = -g
    gg = float(g @ g)
    t_prev = 1.0
    stagnant = 0
    g_mark = float(np.max(np.abs(g))) if g.size else 0.0
    for k in range(max_iter):
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if callback is not None:
            callback(k, f, gnorm)
        if gnorm <= tol:
            return x, k, gnorm, True
        if energy_floor is not None and f < energy_floor:
            raise UnboundedEnergyError(
                f"energy {f:g} fell below {energy_floor:g}: coercivity violated"
            )
        gd = float(g @ d)
        if gd >= 0.0:  # not a descent direction: restart on steepest descent
            d = -g
            gd = -gg
        # secant probe for the directional curvature
        dnorm = float(np.max(np.abs(d)))
        eps = 1e-7 * (1.0 + float(np.max(np.abs(x)))) / max(dnorm, 1e-300)
        _, g_probe = fg(x + eps * d)
        curv = float((g_probe - g) @ d) / eps
        if curv > 0.0:
            t = -gd / curv
        else:
            t = t_prev
        t = min(max(t, 1e-16), 1e12)
        accepted = False
        for _ in range(60):
            f_new, g_new = fg(x + t * d)
            if f_new <= f + 1e-4 * t * gd:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # no progress possible along d at representable step sizes
            return x, k + 1, gnorm, gnorm <= tol
        # Exit when neither the energy (round-off limited) nor the gradient
        # norm makes progress for a sustained stretch; gradient halving
        # counts as progress since conjugate steps keep polishing the
        # gradient long after energy differences drown in round-off.
        g_new_norm = float(np.max(np.abs(g_new)))
        if f - f_new <= 1e-15 * (1.0 + abs(f)):
            if g_new_norm < 0.5 * g_mark:
                g_mark = g_new_norm
                stagnant = 0
            else:
                stagnant += 1
                if stagnant >= 50:
                    x = x + t * d
                    return x, k + 1, g_new_norm, g_new_norm <= tol
        else:
            stagnant = 0
            g_mark = min(g_mark, g_new_norm)
        x = x + t * d
        gg_new = float(g_new @ g_new)
        beta = float(g_new @ (g_new - g)) / gg if gg > 0.0 else 0.0
        beta = max(beta, 0.0)
        if (k + 1) % restart == 0:
            beta = 0.0
        d = -g_new + beta * d
        f, g, gg = f_new, g_new, gg_new
        t_prev = t
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    return x, max_iter, gnorm, gnorm <= tol


def minimize_on_support(
    spec: IntegrandSpec,
    m: DomainMask,
    tol: float = 1e-9,
    max_iter: int = 6000,
    u0: Optional[ScalarField] = None,
    delta_schedule=DELTA_SCHEDULE,
    callback: Optional[Callable] = None,
    cold_init: str = "companion",
) -> tuple[ScalarField, SolveReport]:
    """Minimize the integrand's energy over fields vanishing outside the mask.

    Returns the minimizer (zero on all non-interior nodes of the mask) and a
    report whose energy is the unregularized integral over the active cells.
    Non-convergence is reported, not raised; an energy below -1/tol raises
    UnboundedEnergyError since the problem is then unbounded.

    Cold starts for p != 2 come from the exponent-2 solution of the same
    data (cold_init="companion").  cold_init="zero" starts from the zero
    field instead: for p > 2 the regularized energy is nearly flat in
    regions where the gradient vanishes, so descent cannot remove spurious
    support an initial guess carries there, while a zero start never
    acquires any.
    """
    asm = EnergyAssembler(m.grid, m)
    warm = u0 is not None
    if warm:
        x = u0.values.ravel()[asm.free_ids].copy()
    elif spec.p != 2.0 and spec.companion_p2 is not None and cold_init == "companion":
        u2, _ = minimize_on_support(
            spec.companion_p2, m, tol=tol, max_iter=max_iter
        )
        x = u2.values.ravel()[asm.free_ids].copy()
    else:
        x = np.zeros(asm.n_free)

    floor = -1.0 / tol
    total_iters = 0
    delta = 0.0
    if spec.p != 2.0 and spec.smooth_family is not None:
        # continuation exists to reach the solution's basin; a warm start is
        # already there, so it runs at the final width only
        stages = [delta_schedule[-1]] if warm else list(delta_schedule)
    else:
        stages = [0.0]
    for delta in stages:
        spec_d = spec.smoothed(delta)
        x, iters, gnorm, converged = ncg_minimize(
            asm.value_and_grad(spec_d),
            x,
            tol=tol,
            max_iter=max_iter,
            energy_floor=floor,
            callback=callback,
        )
        total_iters += iters

    values = asm.full_from_free(x).reshape(m.grid.nx, m.grid.ny)
    field = new_field(m.grid, values, boundary_zero=True)
    energy = asm.energy(spec, values.ravel())
    return field, SolveReport(
        energy=energy,
        iterations=total_iters,
        final_gradient_norm=gnorm,
        converged=converged,
        regularization_delta=delta,
    )


def kkt_residual(u: ScalarField, spec: IntegrandSpec, m: DomainMask) -> float:
    """Max absolute component of the reduced energy gradient at free nodes."""
    asm = EnergyAssembler(m.grid, m)
    if asm.n_free == 0:
        return 0.0
    g = asm.grad_nodes(spec, u.values.ravel())
    return float(np.max(np.abs(g[asm.free_ids])))


def torsion(
    m: DomainMask, p: float, tol: float = 1e-9, max_iter: int = 6000
) -> ScalarField:
    """Minimizer of the unit-source energy (1/p)|grad u|^p - u on the mask.

    The result is nonnegative up to -tol times its scale (discrete maximum
    principle for the continuation solutions).
    """
    if m.cell_count() == 0:
        raise SolverError("torsion needs a nonempty mask")
    spec = dirichlet_energy(p, 1.0, 0.0)
    w, report = minimize_on_support(spec, m, tol=tol, max_iter=max_iter)
    scale = max(1.0, w.max_abs())
    if float(w.values.min()) < -1e3 * tol * scale:
        raise SolverError(
            f"torsion came out negative ({w.values.min():g}): solver failure"
        )
    return w


def _bump_field(grid: GridSpec) -> np.ndarray:
    X, Y = grid.node_coords()
    ox, oy = grid.origin
    ex, ey = grid.extent
    return (X - ox) * (ox + ex - X) * (Y - oy) * (oy + ey - Y)


def eigen_estimate(
    grid: GridSpec, p: float, tol: float = 1e-10, max_iter: int = 20000
) -> float:
    """Upper bound for the first zero-trace eigenvalue of the p-Laplacian on D.

    Projected gradient descent on the Rayleigh quotient of the discrete forms
    (renormalizing the p-norm to 1 after each step) from the positive
    distance-product bump.  Raises EigenSolveError when the quotient has not
    stabilized within max_iter steps.
    """
    if p <= 1.0:
        raise SolverError(f"exponent must exceed 1, got {p}")
    asm = EnergyAssembler(grid, None)
    delta = 1e-10 if p < 2.0 else 0.0
    from qshape.integrand import _power_term

    pval, pdz = _power_term(p, delta)

    def forms(x):
        u = asm.full_from_free(x)
        s = (u[asm.va] + u[asm.vb] + u[asm.vc]) / 3.0
        gx = (u[asm.gx1] - u[asm.gx0]) * asm.inv_h
        gy = (u[asm.gy1] - u[asm.gy0]) * asm.inv_h
        z = np.stack([gx, gy], axis=1)
        num = float(pval(z).sum() * asm.area) * p
        den = float((np.abs(s) ** p).sum() * asm.area)
        # gradients of numerator and denominator w.r.t. free values
        wz = pdz(z) * (asm.area * asm.inv_h) * p
        gn = np.bincount(asm.gx1, weights=wz[:, 0], minlength=asm.n_nodes)
        gn -= np.bincount(asm.gx0, weights=wz[:, 0], minlength=asm.n_nodes)
        gn += np.bincount(asm.gy1, weights=wz[:, 1], minlength=asm.n_nodes)
        gn -= np.bincount(asm.gy0, weights=wz[:, 1], minlength=asm.n_nodes)
        ws = p * np.sign(s) * np.abs(s) ** (p - 1.0) * (asm.area / 3.0)
        gd = np.bincount(asm.va, weights=ws, minlength=asm.n_nodes)
        gd += np.bincount(asm.vb, weights=ws, minlength=asm.n_nodes)
        gd += np.bincount(asm.vc, weights=ws, minlength=asm.n_nodes)
        return num, den, gn[asm.free_ids], gd[asm.free_ids]

    x = _bump_field(grid).ravel()[asm.free_ids]
    num, den, gn, gd = forms(x)
    x /= den ** (1.0 / p)
    num, den, gn, gd = forms(x)
    quotient = num / den
    step = 1.0 / max(quotient, 1.0)
    stable = 0
    for it in range(max_iter):
        g = (gn - quotient * gd) / den
        gnorm = float(np.max(np.abs(g)))
        moved = False
        for _ in range(50):
            x_new = x - step * g
            num2, den2, gn2, gd2 = forms(x_new)
            if den2 > 0.0 and num2 / den2 < quotient:
                moved = True
                break
            step *= 0.4
        if not moved:
            break
        x = x_new / den2 ** (1.0 / p)
        num, den, gn, gd = forms(x)
        new_quotient = num / den
        drop = quotient - new_quotient
        quotient = new_quotient
        step *= 1.25
        if drop <= tol * max(quotient, 1.0) and gnorm <= 1e-6 * quotient:
            stable += 1
            if stable >= 3:
                return quotient
        else:
            stable = 0
    if stable == 0 and gnorm > 1e-4 * quotient:
        raise EigenSolveError(
            f"eigenvalue iteration did not stabilize (last quotient {quotient:g})",
            quotient,
        )
    return quotient


# ---------------------------------------------------------------------------
# Sparse quadratic forms of the p = 2 case, shared by the counterexample
# construction and by oracle tests.


def p2_stiffness_matrix(grid: GridSpec):
    """Sparse matrix K with u . K u = integral of |grad u|^2 (exact)."""
    from scipy import sparse

    tri = triangulation(grid)
    n = grid.n_nodes
    w = tri.area / grid.h**2
    rows, cols, data = [], [], []
    for a, b in ((tri.gx0, tri.gx1), (tri.gy0, tri.gy1)):
        rows += [a, b, a, b]
        cols += [a, b, b, a]
        data += [np.full(tri.n_tri, 2 * w), np.full(tri.n_tri, 2 * w),
                 np.full(tri.n_tri, -2 * w), np.full(tri.n_tri, -2 * w)]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    data = np.concatenate(data) / 2.0
    return sparse.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()


def midpoint_mass_matrix(grid: GridSpec):
    """Sparse matrix M with u . M v = sum over triangles of area * mean(u)mean(v)."""
    from scipy import sparse

    tri = triangulation(grid)
    n = grid.n_nodes
    w = tri.area / 9.0
    verts = (tri.va, tri.vb, tri.vc)
    rows, cols, data = [], [], []
    for a in verts:
        for b in verts:
            rows.append(a)
            cols.append(b)
            data.append(np.full(tri.n_tri, w))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    data = np.concatenate(data)
    return sparse.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
