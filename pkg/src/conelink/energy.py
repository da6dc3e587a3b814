"""Energy functional on discrete convex functions.

E(v) = -log I(u) + J(v)^(-1/(n+1+alpha)) with u the Legendre dual of v,
I the kernel integral over the sublevel set {w < 0} of w = u + phi_polar,
and J the weighted inverse-power integral of v over the link.

Quadrature is a midpoint rule on a fixed decomposition: simplices of the link
mesh for J (one subdivision level, two near the boundary), cells of an
adaptive dual box grid for I (one subdivision level inside, two where the
free boundary crosses).  Because the decomposition does not move with v and
the integrand K(x, max(-w, 0)) vanishes continuously at the free boundary,
the assembled analytic gradient is the exact derivative of the quadrature
sum almost everywhere, which is what makes the finite-difference consistency
checks meaningful.  All reductions use compensated summation in a fixed
order, so results are deterministic bit for bit.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .convexfn import (
    BoxGrid,
    DiscreteConvexFunction,
    LinkMesh,
    legendre_max,
)
from .densities import HomogeneousDensity
from .errors import (
    EmptyDomain,
    EmptyInterior,
    EnergyUndefined,
    NonPositiveV,
)
from .geometry import ConeSpec, Polytope, polar_dual

GL_ORDER = 24


def neumaier_sum(values) -> float:
    """Exactly rounded compensated sum; deterministic regardless of order."""
    return math.fsum(np.asarray(values, dtype=float).ravel())


def _gl_cache(order):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


_GL = {m: _gl_cache(m) for m in (GL_ORDER, 2 * GL_ORDER, 4 * GL_ORDER)}


def kernel_K(points, s, cone: ConeSpec, g_sigma: HomogeneousDensity,
             rel_tol=1e-11):
    """Kernel K(x, s): integral of the cone density along the ray above x.

    K(x, s) = int_0^s g(x, sigma + phi_polar(x)) d sigma.  Substituting
    tau = (sigma + phi)^(1+beta) makes the rule exact for constant link
    densities and removes the endpoint power singularity otherwise; the order
    is doubled where two Gauss levels disagree beyond ``rel_tol``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    s = np.asarray(s, dtype=float)
    if np.any(s < -1e-12):
        raise ValueError("kernel evaluated at negative upper limit")
    s = np.maximum(s, 0.0)
    beta = g_sigma.degree
    p = 1.0 + beta
    phi = cone.polar_support(points)
    a = phi ** p
    b = (s + phi) ** p
    if g_sigma.kind == "lebesgue":
        # the ray x / (sigma + phi) never leaves the closed link, so the
        # constant-density kernel is exactly its closed form
        return np.where(s > 0.0, (b - a) / p, 0.0)

    def level(order, mask=None):
        xi, wi = _GL[order]
        idx = np.arange(len(points)) if mask is None else np.where(mask)[0]
        if len(idx) == 0:
            return np.zeros(0), idx
        aa, bb = a[idx], b[idx]
        tau = aa[:, None] + (bb - aa)[:, None] * xi[None, :]
        tau = np.maximum(tau, 1e-300)
        heights = tau ** (1.0 / p)
        base = np.repeat(points[idx], len(xi), axis=0)
        hvals = g_sigma.link_eval(
            base / heights.reshape(-1)[:, None]).reshape(len(idx), len(xi))
        vals = (bb - aa) / p * np.sum(hvals * wi[None, :], axis=1)
        return vals, idx

    out, _ = level(GL_ORDER)
    fine, _ = level(2 * GL_ORDER)
    scale = np.maximum(np.abs(fine), 1e-300)
    bad = np.abs(fine - out) > rel_tol * scale
    result = fine
    if np.any(bad):
        finer, idx = level(4 * GL_ORDER, bad)
        result = fine.copy()
        result[idx] = finer
    result[s <= 0.0] = 0.0
    return result


@dataclass(frozen=True)
class EnergyReport:
    I: float
    J: float
    E: float
    t_star: float
    grad_norm: float
    quadrature_error_estimate: float
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        d = {"I": self.I, "J": self.J, "E": self.E, "t_star": self.t_star,
             "grad_norm": self.grad_norm,
             "quadrature_error_estimate": self.quadrature_error_estimate}
        d.update({k: v for k, v in self.extras.items()
                  if isinstance(v, (int, float, str))})
        return d


@dataclass
class DualData:
    """Fixed quadrature decomposition of the dual side for one v."""

    grid: BoxGrid
    u_corner: np.ndarray
    w_corner: np.ndarray
    points: np.ndarray      # fine midpoints
    weights: np.ndarray
    u_pts: np.ndarray
    w_pts: np.ndarray
    argmax: np.ndarray
    coarse_points: np.ndarray = None
    coarse_weights: np.ndarray = None
    coarse_u: np.ndarray = None
    coarse_w: np.ndarray = None

    @property
    def has_error_level(self):
        return self.coarse_points is not None

    def scaled(self, t: float) -> "DualData":
        """Dual data of t*v: everything scales exactly (u_{tv}(tx) = t u(x))."""
        n = self.grid.dim
        grid = BoxGrid(self.grid.lo * t, self.grid.hi * t, self.grid.shape)
        tn = t ** n
        return DualData(
            grid, self.u_corner * t, self.w_corner * t,
            self.points * t, self.weights * tn, self.u_pts * t,
            self.w_pts * t, self.argmax,
            None if self.coarse_points is None else self.coarse_points * t,
            None if self.coarse_weights is None else self.coarse_weights * tn,
            None if self.coarse_u is None else self.coarse_u * t,
            None if self.coarse_w is None else self.coarse_w * t,
        )


def _cell_children(corner_lo, spacing, level, dim):
    """Midpoints of the 2**(dim*level) congruent children of a cell."""
    m = 2 ** level
    offs = (np.arange(m) + 0.5) / m
    if dim == 1:
        local = offs[:, None]
    else:
        gx, gy = np.meshgrid(offs, offs, indexing="ij")
        local = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return corner_lo[:, None, :] + local[None, :, :] * spacing[None, None, :]


class EnergyContext:
    """Shared machinery to evaluate E, its variations and its rescaling.

    Holds the link mesh for the source body, the target cone, both densities
    and the cached quadrature data that do not change between iterates.
    """

    def __init__(self, mesh: LinkMesh, cone: ConeSpec,
                 dens_P: HomogeneousDensity, dens_Sigma: HomogeneousDensity,
                 dual_res=None, roundness_R=None, v_floor=None):
        self.mesh = mesh
        self.cone = cone
        self.dens_P = dens_P
        self.dens_S = dens_Sigma
        self.n = mesh.n
        self.alpha = dens_P.degree
        self.beta = dens_Sigma.degree
        if self.n + 1 + self.alpha <= 0 or 1 + self.beta <= 0:
            raise EnergyUndefined("degrees outside the admissible range")
        self.dual_res = dual_res or (2 * mesh.res - 1)
        self.R = roundness_R
        self.sup_hS = dens_Sigma.sup_link()
        self.v_floor = v_floor if v_floor is not None else 1e-8 * mesh.domain.diameter
        self._hP_fine = dens_P.link_eval(mesh.quad.points)
        self._hP_coarse = dens_P.link_eval(mesh.quad_coarse.points)
        self._P_polar_box = np.abs(polar_dual(mesh.domain).vertices).max(axis=0)

    # -- J side --------------------------------------------------------

    def J_value(self, v: DiscreteConvexFunction, with_grad_data=False):
        v.require_positive()
        if v.min_value <= self.v_floor:
            raise NonPositiveV(
                f"min nodal value {v.min_value:.3e} at or below the admissibility "
                f"floor {self.v_floor:.3e}")
        expo = self.n + 1 + self.alpha
        rule = self.mesh.quad
        vq = rule.interpolate(v.values)
        dens = self._hP_fine * vq ** (-expo)
        J = neumaier_sum(rule.weights * dens) / expo
        vq_c = self.mesh.quad_coarse.interpolate(v.values)
        J_c = neumaier_sum(self.mesh.quad_coarse.weights * self._hP_coarse
                           * vq_c ** (-expo)) / expo
        err = abs(J - J_c)
        if with_grad_data:
            return J, err, (rule, vq)
        return J, err

    # -- dual side -------------------------------------------------------

    def dual_box(self, v: DiscreteConvexFunction) -> BoxGrid:
        n = self.n
        if self.cone.split_k is None and self.R is not None:
            L = 1.10 * v.min_value * self.R
            lo = np.full(n, -L)
            hi = np.full(n, L)
        else:
            ext = 1.10 * float(v.values.max()) * self._P_polar_box
            lo, hi = -ext, ext
        res = self.dual_res
        pad = (hi - lo) / (res - 1)
        return BoxGrid(lo - pad, hi + pad, (res,) * n)

    def dual_data(self, v: DiscreteConvexFunction, need_error=True) -> DualData:
        grid = self.dual_box(v)
        nodes = self.mesh.nodes
        u_corner, _ = legendre_max(nodes, v.values, grid.nodes)
        w_corner = u_corner + self.cone.polar_support(grid.nodes)
        cells = grid.cell_corners()
        wc = w_corner[cells]
        has_neg = np.any(wc < 0.0, axis=1)
        all_neg = np.all(wc < 0.0, axis=1)
        mixed = has_neg & ~all_neg
        # a convex w can dip below zero inside a cell with nonnegative
        # corners; the origin cell is the only place this matters at scale
        origin_cell = np.all((grid.nodes[cells[:, 0]] <= 0.0)
                             & (grid.nodes[cells[:, -1]] >= 0.0), axis=1)
        mixed |= origin_cell & ~all_neg
        if not np.any(has_neg | mixed):
            raise EmptyInterior("w >= 0 at every dual grid corner")
        spacing = grid.spacing
        lo_all = grid.nodes[cells[:, 0]]

        def build(levels):
            pts, wts = [], []
            for lev, mask in levels:
                if not np.any(mask):
                    continue
                child = _cell_children(lo_all[mask], spacing, lev, grid.dim)
                count = child.shape[1]
                pts.append(child.reshape(-1, grid.dim))
                wts.append(np.full(mask.sum() * count, grid.cell_volume() / count))
            if not pts:
                return np.zeros((0, grid.dim)), np.zeros(0)
            return np.vstack(pts), np.concatenate(wts)

        fine_pts, fine_wts = build([(1, all_neg), (2, mixed)])
        u_pts, argmax = legendre_max(nodes, v.values, fine_pts)
        w_pts = u_pts + self.cone.polar_support(fine_pts)
        if not need_error:
            return DualData(grid, u_corner, w_corner, fine_pts, fine_wts,
                            u_pts, w_pts, argmax)
        coarse_pts, coarse_wts = build([(0, all_neg), (1, mixed)])
        cu, _ = legendre_max(nodes, v.values, coarse_pts)
        cw = cu + self.cone.polar_support(coarse_pts)
        return DualData(grid, u_corner, w_corner, fine_pts, fine_wts,
                        u_pts, w_pts, argmax, coarse_pts, coarse_wts, cu, cw)

    def I_value(self, dual: DualData):
        def integrate(points, weights, u, w):
            active = w < 0.0
            if not np.any(active):
                raise EmptyDomain("sublevel set missed by the quadrature")
            K = kernel_K(points[active], -w[active], self.cone, self.dens_S)
            vals = np.zeros(len(points))
            vals[active] = K
            return neumaier_sum(weights * vals), K, active

        I, K_fine, active = integrate(dual.points, dual.weights, dual.u_pts, dual.w_pts)
        if dual.has_error_level:
            try:
                I_c, _, _ = integrate(dual.coarse_points, dual.coarse_weights,
                                      dual.coarse_u, dual.coarse_w)
                err = abs(I - I_c)
            except EmptyDomain:
                err = I
        else:
            err = float("nan")
        # kernel bound: K(x, -w) <= sup h * (-u)^(1+beta) / (1+beta) on {w<0}
        bound = self.sup_hS * (-dual.u_pts[active]) ** (1.0 + self.beta) / (1.0 + self.beta)
        violation = float(np.max(K_fine - bound, initial=0.0))
        return I, err, violation

    # -- energy ----------------------------------------------------------

    def t_star(self, J: float) -> float:
        return (self.n + 1 + self.beta) * J ** (1.0 / (self.n + 1 + self.alpha))

    def lambda_run(self, I: float, J: float) -> float:
        """Multiplier in det D2 v = lambda * rhs satisfied at critical points."""
        expo = self.n + 1 + self.alpha
        return I / (expo * J ** ((expo + 1.0) / expo))

    def profile(self, I: float, J: float, t) -> float:
        """E(t v) from the exact scaling laws of I and J."""
        expo = self.n + 1 + self.alpha
        return (-math.log(I) - (self.n + 1 + self.beta) * math.log(t)
                + t * J ** (-1.0 / expo))

    def energy(self, v: DiscreteConvexFunction, dual: DualData = None) -> EnergyReport:
        try:
            J, J_err = self.J_value(v)
            if dual is None:
                dual = self.dual_data(v)
            I, I_err, kviol = self.I_value(dual)
        except (EmptyInterior, NonPositiveV) as exc:
            raise EnergyUndefined(f"energy undefined: {exc}", cause=exc) from exc
        expo = self.n + 1 + self.alpha
        E = -math.log(I) + J ** (-1.0 / expo)
        rel_err = I_err / I + J_err / max(J, 1e-300)
        extras = {"I_err": I_err, "J_err": J_err, "kernel_bound_violation": kviol,
                  "lambda_run": self.lambda_run(I, J)}
        return EnergyReport(I, J, E, self.t_star(J), float("nan"), rel_err, extras)

    def gradient(self, v: DiscreteConvexFunction, dual: DualData = None):
        """Nodal derivative of E; exact for the fixed quadrature decomposition.

        The dual contribution uses the envelope-theorem identity: perturbing
        node i changes u only on the region where node i realizes the
        Legendre max, so du = -dv(node) scatters by argmax index.
        """
        if dual is None:
            dual = self.dual_data(v)
        J, _, (rule, vq) = self.J_value(v, with_grad_data=True)
        I, _, _ = self.I_value(dual)
        expo = self.n + 1 + self.alpha
        N = len(self.mesh.nodes)

        grad = np.zeros(N)
        # J part: + (1/expo) J^(-(expo+1)/expo) * sum w b_i h v^-(expo+1)
        coeff = (1.0 / expo) * J ** (-(expo + 1.0) / expo)
        dens = rule.weights * self._hP_fine * vq ** (-(expo + 1.0))
        for j in range(self.n + 1):
            np.add.at(grad, rule.node_idx[:, j], coeff * dens * rule.bary[:, j])

        active = dual.w_pts < 0.0
        mu = np.zeros(len(dual.points))
        heights = -dual.u_pts[active]
        mu[active] = dual.weights[active] * self.dens_S.eval_at_height(
            dual.points[active], heights)
        gI = np.zeros(N)
        np.add.at(gI, dual.argmax, mu)
        grad -= gI / I
        return grad, (I, J, mu)

    def grad_norm(self, grad) -> float:
        """Dual norm of the nodal gradient: bounds |dE/dt| along any nodal
        direction of unit mass-weighted RMS, by Cauchy-Schwarz."""
        mass = np.maximum(self.mesh.node_mass, 1e-300)
        return float(np.sqrt(np.sum(grad ** 2 / mass) * np.sum(mass)))

    def first_variation(self, v: DiscreteConvexFunction, direction,
                        dual: DualData = None) -> float:
        """Directional derivative of E at v along a nodal perturbation."""
        grad, _ = self.gradient(v, dual)
        return float(np.dot(grad, np.asarray(direction, dtype=float)))

    def report(self, v: DiscreteConvexFunction, with_grad=True) -> EnergyReport:
        dual = None
        try:
            dual = self.dual_data(v)
        except EmptyInterior as exc:
            raise EnergyUndefined(f"energy undefined: {exc}", cause=exc) from exc
        rep = self.energy(v, dual)
        gnorm = float("nan")
        if with_grad:
            grad, _ = self.gradient(v, dual)
            gnorm = self.grad_norm(grad)
        return EnergyReport(rep.I, rep.J, rep.E, rep.t_star, gnorm,
                            rep.quadrature_error_estimate, rep.extras)


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2.0) / math.gamma(n / 2.0 + 1.0)


@dataclass(frozen=True)
class CoercivityConstants:
    """Explicit constants in E(v) >= -k log v(0) + c v(0) - C for oblique pairs."""

    k_hat: float
    c_hat: float
    C_hat: float
    alarm: float

    def lower_bound(self, v0: float) -> float:
        return -self.k_hat * math.log(v0) + self.c_hat * v0 - self.C_hat


def coercivity_constants(P: Polytope, cone: ConeSpec,
                         dens_P: HomogeneousDensity, dens_S: HomogeneousDensity,
                         R: float) -> CoercivityConstants:
    """Computable version of the strong-mode energy lower bound.

    I <= C_I m^(n+1+beta) and J^(-1/(n+1+alpha)) >= c_J m with m = inf v give
    E >= -(n+1+beta) log m + c_J m - log C_I; minimizing over m yields the
    alarm floor, and m >= v(0)/(1+C_P R) converts the bound to v(0).
    """
    n = P.dim
    alpha, beta = dens_P.degree, dens_S.degree
    k = n + 1 + beta
    C_P = P.vertex_norm_max
    sup_hS = dens_S.sup_link()
    sup_hP = dens_P.sup_link()
    C_I = sup_hS / (1.0 + beta) * unit_ball_volume(n) * R ** n \
        * (1.0 + C_P * R) ** (1.0 + beta)
    c_J = ((n + 1 + alpha) / (P.volume() * sup_hP)) ** (1.0 / (n + 1 + alpha))
    alarm = k - k * math.log(k / c_J) - math.log(C_I)
    return CoercivityConstants(k, c_J / (1.0 + C_P * R), math.log(C_I), alarm)
