"""Homogeneous densities on cones and their link restrictions.

A density of degree ``a`` on the cone over a body K evaluates as
``height**a * h(link_point)`` where h is the link restriction, extended by
zero outside K.  The structural hypotheses of the theory (bounded link
density, doubling with respect to ellipsoids, bounded vanishing order at the
boundary) are checked empirically at desk scale: the run report records the
evidence rather than a proof.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ApexEvaluation, ConfigError, QuadratureUnderflow
from .geometry import Polytope, uniform_directions

log = logging.getLogger(__name__)

UNDERFLOW_FLOOR = 1e-280


@dataclass(frozen=True)
class HomogeneousDensity:
    """Degree-homogeneous density on a cone, carried by its link evaluator.

    ``link`` is the compact carrier (the body K, or the compact factor of a
    split link); for split links the evaluator reads only the first
    ``link.dim`` coordinates, so the density is constant along the free
    factor.
    """

    degree: float
    kind: str                      # 'lebesgue' | 'monomial' | 'boundary_power' | 'tabulated'
    link: Polytope
    exponents: Optional[tuple] = None
    power: Optional[float] = None
    table_axes: Optional[tuple] = None
    table_values: Optional[np.ndarray] = None
    clamp_outside: bool = True

    def __post_init__(self):
        if self.kind not in ("lebesgue", "monomial", "boundary_power", "tabulated"):
            raise ConfigError(f"unknown density kind {self.kind!r}")
        if self.kind == "monomial" and self.exponents is None:
            raise ConfigError("monomial density needs exponents")
        if self.kind == "boundary_power" and self.power is None:
            raise ConfigError("boundary_power density needs a power")
        if self.kind == "tabulated" and (self.table_axes is None or self.table_values is None):
            raise ConfigError("tabulated density needs axes and values")

    # -- link evaluation ----------------------------------------------------

    def _raw_link_eval(self, pts):
        k = self.link.dim
        pts_k = pts[:, :k]
        if self.kind == "lebesgue":
            vals = np.ones(len(pts))
        elif self.kind == "monomial":
            expo = np.asarray(self.exponents, dtype=float)
            if len(expo) != k:
                raise ConfigError("monomial exponents must match the compact link dim")
            vals = np.prod(np.abs(pts_k) ** expo[None, :], axis=1)
        elif self.kind == "boundary_power":
            d = np.maximum(self.link.boundary_distance(pts_k), 0.0)
            vals = d ** self.power
        else:
            vals = _interp_table(self.table_axes, self.table_values, pts_k)
            neg = vals < 0.0
            if np.any(neg):
                log.warning("tabulated density produced %d negative interpolants; clamped to 0",
                            int(neg.sum()))
                vals = np.maximum(vals, 0.0)
        return vals

    def link_eval(self, pts):
        """h at link points, extended by zero outside the carrier."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        vals = self._raw_link_eval(pts)
        if self.clamp_outside:
            inside = self.link.contains(pts[:, : self.link.dim])
            vals = np.where(inside, vals, 0.0)
        return vals

    def sup_link(self, samples=20000) -> float:
        """Upper bound for h on the link (exact for flat and boundary kinds)."""
        if self.kind == "lebesgue":
            return 1.0
        if self.kind == "boundary_power":
            # distance to the boundary is maximized at the incenter
            from .geometry import chebyshev_center
            _, radius = chebyshev_center(self.link.normals, self.link.offsets)
            return float(radius ** self.power)
        rng = np.random.default_rng(7)
        lo, hi = self.link.bounding_box()
        pts = rng.uniform(lo, hi, size=(samples, self.link.dim))
        pts = np.vstack([pts, self.link.vertices])
        vals = self.link_eval(pts)
        return float(vals.max()) * 1.02

    # -- cone evaluation ----------------------------------------------------

    def eval_cone(self, points):
        """Density at cone points (last coordinate is the height)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        heights = pts[:, -1]
        if np.any(heights <= 0.0):
            raise ApexEvaluation("cone density evaluated at height <= 0")
        link_pts = pts[:, :-1] / heights[:, None]
        return heights ** self.degree * self.link_eval(link_pts)

    def eval_at_height(self, base_points, heights):
        """Density at (base, height) pairs without forming the joined array."""
        base = np.atleast_2d(np.asarray(base_points, dtype=float))
        heights = np.asarray(heights, dtype=float)
        if np.any(heights <= 0.0):
            raise ApexEvaluation("cone density evaluated at height <= 0")
        return heights ** self.degree * self.link_eval(base / heights[:, None])

    def to_dict(self):
        spec = {"degree": self.degree}
        if self.kind == "lebesgue":
            spec["kind"] = "lebesgue"
        elif self.kind == "monomial":
            spec["kind"] = {"monomial": list(self.exponents)}
        elif self.kind == "boundary_power":
            spec["kind"] = {"boundary_power": self.power}
        else:
            spec["kind"] = {"table": {"axes": [list(a) for a in self.table_axes],
                                      "values": self.table_values.tolist()}}
        return spec


def _interp_table(axes, values, pts):
    from scipy.interpolate import RegularGridInterpolator
    interp = RegularGridInterpolator(axes, values, bounds_error=False, fill_value=0.0)
    return interp(pts)


def density_from_spec(spec, link: Polytope) -> HomogeneousDensity:
    """Build a density from its config form {"degree": a, "kind": ...}."""
    degree = float(spec["degree"])
    kind = spec["kind"]
    if kind == "lebesgue":
        return HomogeneousDensity(degree, "lebesgue", link)
    if isinstance(kind, dict):
        if "monomial" in kind:
            return HomogeneousDensity(degree, "monomial", link,
                                      exponents=tuple(float(e) for e in kind["monomial"]))
        if "boundary_power" in kind:
            return HomogeneousDensity(degree, "boundary_power", link,
                                      power=float(kind["boundary_power"]))
        if "table" in kind:
            table = kind["table"]
            axes = tuple(np.asarray(a, dtype=float) for a in table["axes"])
            vals = np.asarray(table["values"], dtype=float)
            return HomogeneousDensity(degree, "tabulated", link,
                                      table_axes=axes, table_values=vals)
    raise ConfigError(f"unrecognized density kind {kind!r}")


# ---------------------------------------------------------------------------
# structural checks
# ---------------------------------------------------------------------------

def _gl_nodes(order):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w       # on [0, 1]


def _ellipsoid_integral(density, center, axes_mat, K: Polytope, half=False,
                        radial=32, angular=256):
    """Integral of h over the ellipsoid center + axes_mat @ B(r), r = 1 or 1/2.

    Rays are clipped at the boundary of K before quadrature, so the only
    integrand seen by the rule is h itself restricted to where it is smooth
    (tabulated and indicator-like densities keep their own kinks).
    """
    dim = K.dim
    rmax = 0.5 if half else 1.0
    rs, rw = _gl_nodes(radial)
    if dim == 1:
        dirs = np.array([[1.0], [-1.0]])
        ang_w = np.ones(2)
    elif dim == 2:
        t = np.linspace(0.0, 2.0 * np.pi, angular, endpoint=False)
        dirs = np.stack([np.cos(t), np.sin(t)], axis=1)
        ang_w = np.full(angular, 2.0 * np.pi / angular)
    else:
        dirs = uniform_directions(dim, angular)
        ang_w = np.full(len(dirs), 4.0 * np.pi / len(dirs))
    ray_vecs = dirs @ axes_mat.T                       # (A, dim) direction images
    # clip each ray at K: largest rho with center + rho*ray in K
    num = K.offsets[None, :] - center[None, :] @ K.normals.T
    den = ray_vecs @ K.normals.T
    with np.errstate(divide="ignore", invalid="ignore"):
        bounds = np.where(den > 1e-300, num / den, np.inf)
    rho_exit = np.minimum(np.min(bounds, axis=1), rmax)
    rho_exit = np.maximum(rho_exit, 0.0)
    jac = abs(np.linalg.det(axes_mat))
    total = 0.0
    # radial GL on [0, rho_exit] per ray, polar volume element rho^(dim-1)
    rho = rho_exit[:, None] * rs[None, :]              # (A, radial)
    pts = center[None, None, :] + rho[:, :, None] * ray_vecs[:, None, :]
    vals = density.link_eval(pts.reshape(-1, dim)).reshape(rho.shape)
    integrand = vals * rho ** (dim - 1)
    per_ray = rho_exit * np.sum(integrand * rw[None, :], axis=1)
    total = float(np.sum(per_ray * ang_w)) * jac
    return total


def check_doubling(density: HomogeneousDensity, K: Polytope, trials: int,
                   seed: int = 0, cap: float = 1e6, ratio_cap: float = 1e12):
    """Empirical doubling check over random ellipsoids centered in K.

    Integrates h over E and over the half-scaled E/2 (rescaled from its
    center) and reports the worst ratio; ``holds`` means the worst ratio stays
    under ``cap``.  Ellipsoids whose inner integral underflows while the outer
    does not count as ratio ``ratio_cap``.
    """
    if trials < 1:
        raise ConfigError("doubling check needs at least one trial")
    rng = np.random.default_rng(seed)
    dim = K.dim
    lo, hi = K.bounding_box()
    diam = K.diameter
    worst = 0.0
    underflows = 0
    for _ in range(trials):
        while True:
            center = rng.uniform(lo, hi)
            if K.contains(center[None, :])[0]:
                break
        lengths = rng.uniform(0.05, 0.5, size=dim) * diam
        if dim == 1:
            axes_mat = np.array([[lengths[0]]])
        elif dim == 2:
            t = rng.uniform(0.0, np.pi)
            rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
            axes_mat = rot @ np.diag(lengths)
        else:
            q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
            axes_mat = q @ np.diag(lengths)
        outer = _ellipsoid_integral(density, center, axes_mat, K, half=False)
        inner = _ellipsoid_integral(density, center, axes_mat, K, half=True)
        if outer <= UNDERFLOW_FLOOR and inner <= UNDERFLOW_FLOOR:
            underflows += 1
            continue
        ratio = ratio_cap if inner <= UNDERFLOW_FLOOR else outer / inner
        worst = max(worst, ratio)
    if underflows == trials:
        raise QuadratureUnderflow("all doubling trials underflowed")
    return worst < cap, worst


def estimate_vanishing_order(density: HomogeneousDensity, P: Polytope,
                             rays_per_point: int = 5, t_count: int = 25):
    """Largest fitted vanishing exponent of h over boundary sample points.

    For each vertex and facet center, h is sampled along a small fan of
    interior rays at logarithmic distances; the reported order at the point is
    the smallest slope of log h against log distance over the fan (the best
    interior cone), and the overall order the largest over points.
    """
    samples = [P.vertices]
    for a, b in zip(P.normals, P.offsets):
        touch = np.abs(P.vertices @ a - b) <= 1e-9 * max(1.0, abs(b))
        if np.any(touch):
            samples.append(P.vertices[touch].mean(axis=0)[None, :])
    base_pts = np.vstack(samples)
    centroid = P.centroid()
    diam = P.diameter
    ts = np.logspace(-4, -1.2, t_count) * diam
    worst = 0.0
    details = []
    for y0 in base_pts:
        main = centroid - y0
        nrm = np.linalg.norm(main)
        if nrm <= 1e-12:
            continue
        main = main / nrm
        best = np.inf
        for j in range(rays_per_point):
            if P.dim == 1 or rays_per_point == 1:
                d = main
            else:
                angle = (j - (rays_per_point - 1) / 2.0) * (np.pi / 12.0)
                if P.dim == 2:
                    rot = np.array([[np.cos(angle), -np.sin(angle)],
                                    [np.sin(angle), np.cos(angle)]])
                    d = rot @ main
                else:
                    d = main
            pts = y0[None, :] + ts[:, None] * d[None, :]
            ok = P.contains(pts)
            if ok.sum() < 5:
                continue
            h = density.link_eval(pts[ok])
            pos = h > 0.0
            if pos.sum() < 5:
                continue
            slope = np.polyfit(np.log(ts[ok][pos]), np.log(h[pos]), 1)[0]
            best = min(best, slope)
        if np.isinf(best):
            best = np.inf
        details.append((tuple(y0), best))
        worst = max(worst, best if np.isfinite(best) else np.inf)
    return worst, details


def check_vanishing_order(density: HomogeneousDensity, P: Polytope, v_max: float,
                          fit_tol: float = 0.1) -> bool:
    """True when the fitted vanishing order stays at or below v_max."""
    if v_max < 0:
        raise ConfigError("v_max must be nonnegative")
    try:
        worst, _ = estimate_vanishing_order(density, P)
    except Exception:
        return False
    return bool(worst <= v_max + fit_tol)
