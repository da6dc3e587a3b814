"""Independent reference solvers used to validate the variational pipeline.

Nothing here shares code with the energy machinery: the identity reference is
a closed form, the interval solver integrates the link equation directly with
a fixed-step fourth-order scheme inside a shooting loop, and the polyhedral
Monge-Ampere measure is computed exactly from subdifferential volumes.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import root
from scipy.spatial import ConvexHull, QhullError

from .convexfn import DiscreteConvexFunction
from .errors import ConfigMismatch, NoRoot
from .geometry import Polytope

BLOWUP = 1e12


# ---------------------------------------------------------------------------
# identity configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IdentityReference:
    """Closed-form link solution when source and target data coincide.

    v(y) = sqrt((1 + |y|^2) / 2) lifts (with unit degree split) to
    phi = |cone point|^2 / 2, whose gradient is the identity map, so the
    transport equation holds with ratio one.  The link Hessian satisfies
    (1+gamma)^(n+1) gamma * v^(n+2) det D2 v = 1 exactly (gamma = 1 here).
    """

    dim: int

    def values(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.sqrt((1.0 + (pts ** 2).sum(axis=1)) / 2.0)

    def gradient(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return pts / (2.0 * self.values(pts)[:, None])

    def hessian_det(self, pts):
        v = self.values(np.atleast_2d(pts))
        return 2.0 ** (-(self.dim + 1)) * v ** (-(self.dim + 2))

    def star(self, pts):
        # <grad v, y> - v collapses to -1/(2v) for this closed form
        return -1.0 / (2.0 * self.values(pts))


def identity_reference(P: Polytope, Sigma: Polytope, alpha: float, beta: float,
                       same_density=True) -> IdentityReference:
    """The closed form applies only when the two sides carry identical data."""
    if alpha != beta:
        raise ConfigMismatch("identity reference needs equal degrees")
    if not same_density:
        raise ConfigMismatch("identity reference needs identical densities")
    if P.dim != Sigma.dim or len(P.vertices) != len(Sigma.vertices):
        raise ConfigMismatch("identity reference needs identical bodies")
    a = np.array(sorted(map(tuple, np.round(P.vertices, 12))))
    b = np.array(sorted(map(tuple, np.round(Sigma.vertices, 12))))
    if not np.allclose(a, b, atol=1e-9):
        raise ConfigMismatch("identity reference needs identical bodies")
    return IdentityReference(P.dim)


# ---------------------------------------------------------------------------
# interval shooting
# ---------------------------------------------------------------------------

@dataclass
class ShootingSolution1D:
    y: np.ndarray
    v: np.ndarray
    dv: np.ndarray
    v0: float
    dv0: float
    residuals: tuple
    steps: int
    all_roots: list = None      # every admissible root found (multiplicity)

    def interp(self, pts):
        return np.interp(np.asarray(pts, dtype=float), self.y, self.v)

    def interp_dv(self, pts):
        return np.interp(np.asarray(pts, dtype=float), self.y, self.dv)

    def to_dict(self):
        return {"y": self.y.tolist(), "v": self.v.tolist(), "dv": self.dv.tolist(),
                "v0": self.v0, "dv0": self.dv0,
                "residuals": list(self.residuals), "steps": self.steps}


class _Blowup(Exception):
    pass


def _interval_polar_support(sigma_lo, sigma_hi):
    """phi of the polar of [lo, hi] (lo < 0 < hi): max(z/lo, z/hi)."""
    def phi(z):
        return max(z / sigma_lo, z / sigma_hi)
    return phi


def _scalar_density(dens):
    """Fast scalar closure for a one-dimensional link density."""
    lo = float(dens.link.vertices.min())
    hi = float(dens.link.vertices.max())
    if dens.kind == "lebesgue":
        return lambda t: 1.0 if lo <= t <= hi else 0.0
    if dens.kind == "monomial":
        e = float(dens.exponents[0])
        return lambda t: abs(t) ** e if lo <= t <= hi else 0.0
    if dens.kind == "boundary_power":
        p = float(dens.power)
        return lambda t: max(min(t - lo, hi - t), 0.0) ** p
    axes, vals = dens.table_axes, dens.table_values
    return lambda t: float(np.interp(t, axes[0], vals)) if lo <= t <= hi else 0.0


def _default_rhs(alpha, beta, h_P, h_Sigma):
    """Link equation right side for intervals.

    The target-density argument is clamped to the closed target body: the
    converged solution keeps it inside anyway, and clamping removes the
    cliff that the zero extension would put right next to the shooting
    basin (trajectories that momentarily overshoot stay integrable).
    """
    hp = _scalar_density(h_P)
    hs = _scalar_density(h_Sigma)
    s_lo = float(h_Sigma.link.vertices.min())
    s_hi = float(h_Sigma.link.vertices.max())

    def rhs(y, v, dv):
        star = y * dv - v
        if v <= 1e-12 or -star <= 1e-12:
            raise _Blowup
        arg = min(max(dv / (-star), s_lo), s_hi)
        hs_val = hs(arg)
        if hs_val <= 0.0:
            raise _Blowup
        return hp(y) / (v ** (3.0 + alpha) * (-star) ** beta * hs_val)
    return rhs


def _integrate(rhs, y_end, v0, dv0, steps):
    """Fixed-step RK4 for v'' = rhs(y, v, v') from 0 to y_end."""
    h = y_end / steps
    ys = np.linspace(0.0, y_end, steps + 1)
    vs = np.empty(steps + 1)
    ps = np.empty(steps + 1)
    v, p = float(v0), float(dv0)
    vs[0], ps[0] = v, p
    h2, h6 = h / 2.0, h / 6.0
    for i in range(steps):
        y = ys[i]
        a1 = rhs(y, v, p)
        v2, p2 = v + h2 * p, p + h2 * a1
        a2 = rhs(y + h2, v2, p2)
        v3, p3 = v + h2 * p2, p + h2 * a2
        a3 = rhs(y + h2, v3, p3)
        v4, p4 = v + h * p3, p + h * a3
        a4 = rhs(y + h, v4, p4)
        v = v + h6 * (p + 2.0 * p2 + 2.0 * p3 + p4)
        p = p + h6 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        if not (math.isfinite(v) and math.isfinite(p)) or abs(v) > BLOWUP:
            raise _Blowup
        vs[i + 1], ps[i + 1] = v, p
    return ys, vs, ps


def shoot_1d(P: Polytope, Sigma: Polytope, alpha: float, beta: float,
             h_P, h_Sigma, tol=1e-10, steps=2000,
             rhs=None, polar_support=None,
             grid_v0=(0.1, 3.0), grid_dv0=(-2.0, 2.0), grid_size=16,
             init=None):
    """Shooting solver for the interval free boundary problem.

    Integrates the link equation from the origin with unknown value and
    slope, and drives the free boundary condition star(v) + phi_polar(v') to
    zero at both endpoints with a multistart over a coarse (v0, v'0) grid,
    refinement passes around band-best cells (the degenerate large-scale
    valley of near-affine trajectories is screened out by a scale cap), and
    a Newton-type root polish.  ``init`` skips the multistart.
    """
    if P.dim != 1 or Sigma.dim != 1:
        raise ConfigMismatch("interval solver needs one-dimensional links")
    p_lo, p_hi = float(P.vertices.min()), float(P.vertices.max())
    s_lo, s_hi = float(Sigma.vertices.min()), float(Sigma.vertices.max())
    if not (p_lo < 0 < p_hi and s_lo < 0 < s_hi):
        raise ConfigMismatch("links must contain the origin in the interior")
    phi_pol = polar_support or _interval_polar_support(s_lo, s_hi)
    rhs = rhs or _default_rhs(alpha, beta, h_P, h_Sigma)

    def residuals(v0, dv0, n_steps):
        if v0 <= 0:
            return np.array([BLOWUP, BLOWUP])
        out = []
        for y_end in (p_hi, p_lo):
            try:
                ys, vs, ps = _integrate(rhs, y_end, v0, dv0, n_steps)
            except _Blowup:
                return np.array([BLOWUP, BLOWUP])
            star = ys[-1] * ps[-1] - vs[-1]
            out.append(star + phi_pol(ps[-1]))
        return np.array(out)

    def scan(v_range, d_range, n):
        vals = []
        for v0 in np.linspace(*v_range, n):
            for d0 in np.linspace(*d_range, n):
                r = residuals(v0, d0, 200)
                vals.append((float(np.linalg.norm(r)), v0, d0))
        return vals

    def polish(z, n_steps):
        res = residuals(z[0], z[1], n_steps)
        for _ in range(12):
            if np.abs(res).max() <= 0.01 * tol:
                break
            eps = 1e-7 * max(1.0, abs(z[0]))
            jac = np.empty((2, 2))
            jac[:, 0] = (residuals(z[0] + eps, z[1], n_steps) - res) / eps
            jac[:, 1] = (residuals(z[0], z[1] + eps, n_steps) - res) / eps
            # least squares: symmetric data make the two residuals identical
            # and the Jacobian rank one, where a plain solve would blow up
            step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
            z_new = z + step
            res_new = residuals(z_new[0], z_new[1], n_steps)
            if not np.all(np.isfinite(res_new)) \
                    or np.abs(res_new).max() >= np.abs(res).max():
                break
            z, res = z_new, res_new
        return z, res

    # scale cap rejects the degenerate large-scale valley: nearly affine
    # trajectories satisfy both boundary conditions with vanishing curvature
    v0_cap = 2.0 * grid_v0[1]
    dv0_cap = 2.0 * max(abs(grid_dv0[0]), abs(grid_dv0[1]))

    if init is not None:
        z, res = polish(np.asarray(init, dtype=float), steps)
        if np.abs(res).max() > tol:
            raise NoRoot(f"polish from init stalled at {np.abs(res).max():.3e}")
        roots = [(z, res)]
    else:
        landscape = scan(grid_v0, grid_dv0, grid_size)
        landscape.sort()
        if landscape[0][0] >= BLOWUP:
            raise NoRoot("all shots blew up before reaching the boundary",
                         landscape=landscape[:64])
        dv_cell = (grid_v0[1] - grid_v0[0]) / (grid_size - 1)
        dd_cell = (grid_dv0[1] - grid_dv0[0]) / (grid_size - 1)
        # diversify the polish starts across value bands: the degenerate
        # valley otherwise monopolizes the top of the list
        bands = {}
        for score, bv, bd in landscape:
            band = int((bv - grid_v0[0]) / max(dv_cell * 2, 1e-12))
            if band not in bands or score < bands[band][0]:
                bands[band] = (score, bv, bd)
        seeds = sorted(bands.values())[:8]
        starts = []
        for _, bv, bd in seeds:
            refined = scan((bv - dv_cell, bv + dv_cell),
                           (bd - dd_cell, bd + dd_cell), grid_size)
            refined.sort()
            starts.append(refined[0])
        starts.sort()
        coarse_steps = min(400, steps)
        candidates = []
        for _, bv, bd in starts:
            sol = root(lambda z: residuals(z[0], z[1], coarse_steps),
                       x0=[bv, bd], method="hybr", options={"xtol": 1e-12})
            z = np.asarray(sol.x, dtype=float)
            r = residuals(z[0], z[1], coarse_steps)
            if np.abs(r).max() > 1e-5:
                continue
            if not (0.0 < z[0] <= v0_cap and abs(z[1]) <= dv0_cap):
                continue
            if any(abs(z[0] - c[0]) + abs(z[1] - c[1]) < 1e-4 for c in candidates):
                continue
            candidates.append(z)
        roots = []
        for z in candidates:
            z, res = polish(z.copy(), steps)
            if np.abs(res).max() > tol:
                continue
            if not (0.0 < z[0] <= v0_cap and abs(z[1]) <= dv0_cap):
                continue
            if any(abs(z[0] - r[0]) + abs(z[1] - r[1]) < 1e-6 for r, _ in roots):
                continue
            roots.append((z.copy(), res.copy()))
        if not roots:
            raise NoRoot("multistart exhausted without an admissible root",
                         landscape=starts[:64])
        roots.sort(key=lambda zr: (float(np.abs(zr[1]).max()), float(zr[0][0])))
    z, res = roots[0]
    v0, dv0 = float(z[0]), float(z[1])
    ys_r, vs_r, ps_r = _integrate(rhs, p_hi, v0, dv0, steps)
    ys_l, vs_l, ps_l = _integrate(rhs, p_lo, v0, dv0, steps)
    y = np.concatenate([ys_l[::-1], ys_r[1:]])
    v = np.concatenate([vs_l[::-1], vs_r[1:]])
    dv = np.concatenate([ps_l[::-1], ps_r[1:]])
    out = ShootingSolution1D(y, v, dv, v0, dv0, (float(res[0]), float(res[1])),
                             steps)
    out.all_roots = [(float(z[0]), float(z[1])) for z, _ in roots]
    return out


def shooting_convergence_order(P, Sigma, alpha, beta, h_P, h_Sigma,
                               steps=(250, 500, 1000), **kw):
    """Observed order from solutions at successively halved step sizes.

    Each level re-converges the shooting parameters (warm-started from the
    previous level) so the comparison isolates the stepper error.
    """
    sols = []
    hint = kw.pop("init", None)
    for s in steps:
        sol = shoot_1d(P, Sigma, alpha, beta, h_P, h_Sigma, steps=s,
                       init=hint, **kw)
        hint = (sol.v0, sol.dv0)
        sols.append(sol)
    probe = np.linspace(float(P.vertices.min()), float(P.vertices.max()), 101)
    e01 = np.max(np.abs(sols[0].interp(probe) - sols[1].interp(probe)))
    e12 = np.max(np.abs(sols[1].interp(probe) - sols[2].interp(probe)))
    if e12 <= 0:
        return float("inf"), sols
    return float(np.log2(e01 / e12)), sols


# ---------------------------------------------------------------------------
# polyhedral Monge-Ampere measure
# ---------------------------------------------------------------------------

def _hull_volume(points):
    pts = np.unique(np.round(points, 14), axis=0)
    dim = pts.shape[1]
    if len(pts) <= dim:
        return 0.0
    if dim == 1:
        return float(pts.max() - pts.min())
    try:
        return float(ConvexHull(pts).volume)
    except QhullError:
        return 0.0


def node_subdifferential_volumes(v: DiscreteConvexFunction):
    """|subdifferential| per node: the volume of the hull of incident
    piecewise gradients.  For a convex nodal function these cells tile the
    gradient image, so they sum to its total volume."""
    mesh = v.mesh
    grads = v.simplex_gradients()
    incident = [[] for _ in range(len(mesh.nodes))]
    for si, simplex in enumerate(mesh.simplices):
        if mesh.degenerate[si]:
            continue
        for node in simplex:
            incident[node].append(grads[si])
    vols = np.zeros(len(mesh.nodes))
    for i, gs in enumerate(incident):
        if len(gs) == 0:
            continue
        vols[i] = _hull_volume(np.array(gs))
    return vols, grads


def ma_measure_check(v: DiscreteConvexFunction, rhs: Callable,
                     cells_per_axis=8, interior_margin=None):
    """Exact polyhedral Monge-Ampere mass against the equation right side.

    Bins the nodal subdifferential volumes over a coarse partition of the
    body and compares with the quadrature of ``rhs`` on each cell.  Cells
    meeting the boundary are excluded (their subdifferentials pick up the
    free boundary wedge).  Returns per-cell rows and aggregate figures.
    """
    mesh = v.mesh
    vols, _ = node_subdifferential_volumes(v)
    lo, hi = mesh.domain.bounding_box()
    span = np.maximum(hi - lo, 1e-12)
    if interior_margin is None:
        interior_margin = 1.5 * float(np.max(span)) / (mesh.res - 1)

    def bin_of(pts):
        rel = (pts - lo) / span
        ij = np.clip((rel * cells_per_axis).astype(int), 0, cells_per_axis - 1)
        flat = ij[:, 0]
        for d in range(1, mesh.n):
            flat = flat * cells_per_axis + ij[:, d]
        return flat

    nbins = cells_per_axis ** mesh.n
    ma_mass = np.zeros(nbins)
    np.add.at(ma_mass, bin_of(mesh.nodes), vols)
    rule = mesh.quad
    rhs_vals = np.asarray(rhs(rule.points), dtype=float)
    rhs_mass = np.zeros(nbins)
    np.add.at(rhs_mass, bin_of(rule.points), rule.weights * rhs_vals)

    # keep bins whose closure stays clear of the body boundary
    cell_w = span / cells_per_axis
    centers = []
    for flat in range(nbins):
        idx = []
        rem = flat
        for d in range(mesh.n - 1, -1, -1):
            idx.append(rem % cells_per_axis)
            rem //= cells_per_axis
        idx = idx[::-1]
        centers.append(lo + (np.array(idx) + 0.5) * cell_w)
    centers = np.array(centers)
    half_diag = 0.5 * float(np.linalg.norm(cell_w))
    interior = mesh.domain.boundary_distance(centers) > half_diag + interior_margin

    per_cell = []
    for flat in np.where(interior)[0]:
        per_cell.append((flat, ma_mass[flat], rhs_mass[flat]))
    total_ma = sum(m for _, m, _ in per_cell)
    total_rhs = sum(r for _, _, r in per_cell)
    # aggregate compares region totals: a nodal cell straddling a bin border
    # lands in one bin while the quadrature splits it, which cancels in sums
    aggregate = abs(total_ma - total_rhs) / total_rhs if total_rhs > 0 else float("nan")
    cellwise = sum(abs(m - r) for _, m, r in per_cell) / total_rhs \
        if total_rhs > 0 else float("nan")
    return {"per_cell": per_cell, "aggregate": float(aggregate),
            "cellwise": float(cellwise), "interior_cells": int(interior.sum())}


def gradient_image_volume(v: DiscreteConvexFunction):
    """Total volume of the gradient image of a convex nodal function."""
    grads = v.simplex_gradients()[~v.mesh.degenerate]
    return _hull_volume(grads)
