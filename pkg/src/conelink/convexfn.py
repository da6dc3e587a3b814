"""Piecewise-linear calculus for convex functions on a polytope.

Functions live as nodal values on a triangulated grid clipped to the body,
with boundary trace points so the triangulation covers the body exactly.
Convexity is certified (and restored after optimizer steps) by replacing the
values with the lower convex envelope of the lifted node cloud, computed from
the lower faces of a convex hull.  The Legendre transform of a nodal function
is the exact max over nodes of <x, y_i> - v_i, evaluated anywhere, which keeps
the whole dual side (free boundary, kernel quadrature, gradient scatter)
consistent with the primal representation.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, QhullError

from .errors import EmptyInterior, GradientUndefined, NonPositiveV
from .geometry import CONTAIN_TOL, VERTEX_TOL, ConeSpec, Polytope

BOUNDARY_TOL = 1e-9
DEGENERATE_VOL_TOL = 1e-14


# ---------------------------------------------------------------------------
# mesh construction
# ---------------------------------------------------------------------------

def _grid_nodes(P: Polytope, res: int):
    lo, hi = P.bounding_box()
    axes = [np.linspace(lo[d], hi[d], res) for d in range(P.dim)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    inside = P.boundary_distance(pts) >= -BOUNDARY_TOL * max(1.0, P.diameter)
    return pts[inside], axes


def _boundary_trace_points(P: Polytope, axes):
    """Polygon vertices plus intersections of grid lines with the boundary."""
    pts = [P.vertices]
    if P.dim == 1:
        return P.vertices
    if P.dim != 2:
        raise NotImplementedError("link meshes are built for dim <= 2")
    verts = P.vertices
    hull = ConvexHull(verts)
    loop = verts[hull.vertices]
    m = len(loop)
    for i in range(m):
        a, b = loop[i], loop[(i + 1) % m]
        for axis in (0, 1):
            den = b[axis] - a[axis]
            if abs(den) < 1e-14:
                continue
            for c in axes[axis]:
                t = (c - a[axis]) / den
                if 1e-12 < t < 1.0 - 1e-12:
                    pts.append((a + t * (b - a))[None, :])
    return np.vstack(pts)


def _dedup_against(base, extra, tol):
    if len(base) == 0:
        return extra
    keep = []
    for p in extra:
        if np.min(np.max(np.abs(base - p), axis=1)) > tol and (
            not keep or np.min(np.max(np.abs(np.array(keep) - p), axis=1)) > tol
        ):
            keep.append(p)
    return np.array(keep) if keep else np.zeros((0, base.shape[1]))


def _subdivide(simplex_pts):
    """Congruent children of a segment or triangle."""
    if len(simplex_pts) == 2:
        a, b = simplex_pts
        m = 0.5 * (a + b)
        return [np.array([a, m]), np.array([m, b])]
    a, b, c = simplex_pts
    ab, bc, ca = 0.5 * (a + b), 0.5 * (b + c), 0.5 * (c + a)
    return [
        np.array([a, ab, ca]),
        np.array([ab, b, bc]),
        np.array([ca, bc, c]),
        np.array([ab, bc, ca]),
    ]


@dataclass(frozen=True)
class QuadratureRule:
    """Midpoint quadrature points with parent-simplex interpolation data."""

    points: np.ndarray      # (Q, n)
    weights: np.ndarray     # (Q,)
    parent: np.ndarray      # (Q,) simplex index
    bary: np.ndarray        # (Q, n+1) barycentric coords in the parent
    node_idx: np.ndarray    # (Q, n+1) node indices of the parent

    def interpolate(self, values):
        return np.sum(self.bary * values[self.node_idx], axis=1)


class LinkMesh:
    """Triangulated grid over a polytope, with quadrature and gradients."""

    def __init__(self, domain: Polytope, res: int):
        self.domain = domain
        self.res = res
        scale = max(1.0, domain.diameter)
        if domain.dim == 1:
            lo, hi = float(domain.vertices.min()), float(domain.vertices.max())
            nodes = np.linspace(lo, hi, res)[:, None]
            simplices = np.stack([np.arange(res - 1), np.arange(1, res)], axis=1)
            self.nodes = nodes
            self.simplices = simplices
        else:
            interior, axes = _grid_nodes(domain, res)
            trace = _boundary_trace_points(domain, axes)
            trace = _dedup_against(interior, trace, 0.25 * (axes[0][1] - axes[0][0]) * 1e-4 + VERTEX_TOL)
            nodes = np.vstack([interior, trace]) if len(trace) else interior
            tri = Delaunay(nodes)
            self.nodes = nodes
            self.simplices = np.array(tri.simplices)
            self._delaunay = tri
        self.n = domain.dim
        self._build_geometry(scale)
        self._build_quadrature()

    def _build_geometry(self, scale):
        pts = self.nodes[self.simplices]          # (S, n+1, n)
        edges = pts[:, 1:, :] - pts[:, :1, :]      # (S, n, n)
        dets = np.linalg.det(edges) if self.n > 1 else edges[:, 0, 0]
        fact = 1.0 if self.n == 1 else 2.0
        self.volumes = np.abs(dets) / fact
        self.degenerate = self.volumes <= DEGENERATE_VOL_TOL * scale ** self.n
        inv = np.zeros_like(edges)
        ok = ~self.degenerate
        if self.n == 1:
            inv[ok, 0, 0] = 1.0 / edges[ok, 0, 0]
        else:
            inv[ok] = np.linalg.inv(edges[ok])
        self._edge_inv = inv
        dist = self.domain.boundary_distance(self.nodes)
        self.boundary_node = dist <= 1e-7 * scale
        self.interior_node = ~self.boundary_node
        self.boundary_simplex = np.any(self.boundary_node[self.simplices], axis=1)
        # lumped node masses for norms and preconditioning
        mass = np.zeros(len(self.nodes))
        np.add.at(mass, self.simplices.ravel(),
                  np.repeat(self.volumes / (self.n + 1), self.n + 1))
        self.node_mass = mass

    def _barycentric(self, simplex_idx, points):
        # rows of the edge matrix are p_i - p_0, so weights solve E^T b = y - p_0
        s = self.simplices[simplex_idx]
        p0 = self.nodes[s[:, 0]]
        rest = np.einsum("sji,sj->si", self._edge_inv[simplex_idx], points - p0)
        b0 = 1.0 - rest.sum(axis=1)
        return np.concatenate([b0[:, None], rest], axis=1)

    def _rule_for(self, levels):
        """Midpoint rule with per-simplex subdivision depth ``levels``."""
        pts_all, wts, par = [], [], []
        for si, simplex in enumerate(self.simplices):
            if self.degenerate[si]:
                continue
            stack = [(self.nodes[simplex], int(levels[si]))]
            while stack:
                verts, lev = stack.pop()
                if lev == 0:
                    pts_all.append(verts.mean(axis=0))
                    wts.append(0.0)
                    par.append(si)
                else:
                    stack.extend((child, lev - 1) for child in _subdivide(verts))
        points = np.array(pts_all)
        parent = np.array(par, dtype=int)
        # weights: parent volume split evenly among its children at that depth
        counts = np.bincount(parent, minlength=len(self.simplices)).astype(float)
        weights = self.volumes[parent] / counts[parent]
        bary = self._barycentric(parent, points)
        node_idx = self.simplices[parent]
        return QuadratureRule(points, weights, parent, bary, node_idx)

    def _build_quadrature(self):
        base = np.zeros(len(self.simplices), dtype=int)
        fine = np.ones(len(self.simplices), dtype=int)
        fine[self.boundary_simplex] = 2
        self.quad_coarse = self._rule_for(base)
        self.quad = self._rule_for(fine)

    # -- evaluation --------------------------------------------------------

    def locate(self, points):
        points = np.atleast_2d(points)
        if self.n == 1:
            x = points[:, 0]
            return np.clip(np.searchsorted(self.nodes[:, 0], x, side="right") - 1,
                           0, len(self.simplices) - 1)
        return self._delaunay.find_simplex(points)

    def interpolate(self, values, points):
        points = np.atleast_2d(points)
        idx = self.locate(points)
        if np.any(idx < 0):
            raise EmptyInterior("interpolation point outside the mesh")
        bary = self._barycentric(idx, points)
        return np.sum(bary * values[self.simplices[idx]], axis=1)


# ---------------------------------------------------------------------------
# lower convex envelope
# ---------------------------------------------------------------------------

def envelope_planes(nodes, values):
    """Affine pieces (g, c) of the lower convex envelope of the lifted cloud.

    The envelope equals max_f <g_f, y> + c_f globally, which also provides the
    natural convex extension outside the node hull.
    """
    n = nodes.shape[1]
    lifted = np.concatenate([nodes, values[:, None]], axis=1)
    try:
        hull = ConvexHull(lifted)
    except QhullError:
        # affine data: fit the single plane through the cloud
        A = np.concatenate([nodes, np.ones((len(nodes), 1))], axis=1)
        coef, *_ = np.linalg.lstsq(A, values, rcond=None)
        return coef[:n][None, :], np.array([coef[n]])
    eqs = hull.equations          # rows: (normal_y, normal_t, offset)
    lower = eqs[:, n] < -1e-8
    e = eqs[lower, :n]
    en = eqs[lower, n]
    f = eqs[lower, n + 1]
    g = -e / en[:, None]
    c = -f / en
    return g, c


def lower_convex_envelope(nodes, values):
    """Envelope values at the nodes; never above the input values."""
    g, c = envelope_planes(nodes, values)
    best = np.max(nodes @ g.T + c[None, :], axis=1)
    return np.minimum(values, best)


def eval_planes(g, c, points):
    points = np.atleast_2d(points)
    return np.max(points @ g.T + c[None, :], axis=1)


# ---------------------------------------------------------------------------
# discrete convex functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscreteConvexFunction:
    """Nodal values with a convexity certificate on a LinkMesh."""

    mesh: LinkMesh
    values: np.ndarray
    certified: bool = False

    @property
    def min_value(self) -> float:
        # a convex PL function attains its minimum at a node
        return float(self.values.min())

    def require_positive(self):
        if self.min_value <= 0.0:
            raise NonPositiveV(f"min nodal value {self.min_value:.3e} <= 0")

    def evaluate(self, points):
        return self.mesh.interpolate(self.values, points)

    def value_at_origin(self) -> float:
        return float(self.evaluate(np.zeros((1, self.mesh.n)))[0])

    def simplex_gradients(self):
        """Constant gradient per simplex; zero rows on degenerate simplices."""
        s = self.mesh.simplices
        dv = self.values[s[:, 1:]] - self.values[s[:, 0]][:, None]
        grads = np.einsum("sij,sj->si", self.mesh._edge_inv, dv)
        grads[self.mesh.degenerate] = 0.0
        return grads

    def node_gradients(self):
        """Volume-weighted average of incident simplex gradients (reporting only)."""
        grads = self.simplex_gradients()
        acc = np.zeros((len(self.mesh.nodes), self.mesh.n))
        wacc = np.zeros(len(self.mesh.nodes))
        for j in range(self.mesh.n + 1):
            np.add.at(acc, self.mesh.simplices[:, j], grads * self.mesh.volumes[:, None])
            np.add.at(wacc, self.mesh.simplices[:, j], self.mesh.volumes)
        return acc / np.maximum(wacc, 1e-300)[:, None]

    def star_at(self, rule: QuadratureRule):
        """Star transform <grad v, y> - v at quadrature points of the rule."""
        grads = self.simplex_gradients()[rule.parent]
        if np.any(self.mesh.degenerate[rule.parent]):
            raise GradientUndefined("quadrature touches a degenerate simplex")
        vals = rule.interpolate(self.values)
        return np.sum(grads * rule.points, axis=1) - vals, grads

    def scale(self, t: float) -> "DiscreteConvexFunction":
        return DiscreteConvexFunction(self.mesh, self.values * float(t), self.certified)

    def shift_linear(self, slope) -> "DiscreteConvexFunction":
        """Subtract the linear function <slope, y>; preserves convexity exactly."""
        vals = self.values - self.mesh.nodes @ np.asarray(slope, dtype=float)
        return DiscreteConvexFunction(self.mesh, vals, self.certified)

    def to_dict(self):
        return {"nodes": self.mesh.nodes.tolist(), "values": self.values.tolist()}


def convexify(mesh: LinkMesh, values) -> DiscreteConvexFunction:
    """Project nodal values onto the lower convex envelope of the cloud.

    Idempotent, never increases a nodal value, and the output carries the
    convexity certificate (re-derivable by recomputing the envelope).
    """
    values = np.asarray(values, dtype=float)
    env = lower_convex_envelope(mesh.nodes, values)
    return DiscreteConvexFunction(mesh, env, certified=True)


def certify_convex(dcf: DiscreteConvexFunction, tol=1e-9) -> bool:
    env = lower_convex_envelope(dcf.mesh.nodes, dcf.values)
    scale = max(1.0, float(np.abs(dcf.values).max()))
    return bool(np.max(dcf.values - env) <= tol * scale)


# ---------------------------------------------------------------------------
# Legendre transform and the dual grid
# ---------------------------------------------------------------------------

def legendre_max(nodes, values, X, chunk=16384):
    """u(x) = max_i <x, y_i> - v_i with the first maximizing node index."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.empty(len(X))
    arg = np.empty(len(X), dtype=int)
    for start in range(0, len(X), chunk):
        block = X[start:start + chunk]
        scores = block @ nodes.T
        scores -= values[None, :]
        idx = np.argmax(scores, axis=1)
        out[start:start + chunk] = scores[np.arange(len(block)), idx]
        arg[start:start + chunk] = idx
    return out, arg


@dataclass(frozen=True)
class BoxGrid:
    """Uniform tensor grid on a box in the dual space."""

    lo: np.ndarray
    hi: np.ndarray
    shape: tuple

    def __post_init__(self):
        axes = [np.linspace(self.lo[d], self.hi[d], self.shape[d]) for d in range(len(self.shape))]
        grids = np.meshgrid(*axes, indexing="ij")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "nodes", np.stack([g.ravel() for g in grids], axis=1))
        object.__setattr__(self, "spacing", np.array(
            [(self.hi[d] - self.lo[d]) / (self.shape[d] - 1) for d in range(len(self.shape))]))

    @property
    def dim(self):
        return len(self.shape)

    def cell_corners(self):
        """Corner node indices per cell, shape (C, 2**dim)."""
        if self.dim == 1:
            m = self.shape[0]
            return np.stack([np.arange(m - 1), np.arange(1, m)], axis=1)
        mx, my = self.shape
        i, j = np.meshgrid(np.arange(mx - 1), np.arange(my - 1), indexing="ij")
        base = (i * my + j).ravel()
        return np.stack([base, base + my, base + 1, base + my + 1], axis=1)

    def cell_volume(self):
        return float(np.prod(self.spacing))


@dataclass(frozen=True)
class GridFunction:
    """Values of a function on a BoxGrid (the dual potential u and w live here)."""

    grid: BoxGrid
    values: np.ndarray

    def to_dict(self):
        return {"nodes": self.grid.nodes.tolist(), "values": self.values.tolist()}


def make_dual_grid(v: DiscreteConvexFunction, cone: ConeSpec, res: int,
                   R: Optional[float] = None) -> BoxGrid:
    """Box grid guaranteed to contain the sublevel set {w < 0}.

    In oblique configurations {w < 0} sits inside the ball of radius
    delta * R around the origin with delta = inf v; without R a growth bound
    from the Legendre transform is used instead.
    """
    n = v.mesh.n
    delta = v.min_value
    if R is not None:
        L = 1.10 * delta * R
    else:
        # u(x) >= phi_P(x) - max v, so {u < 0} is inside (max v) * polar(P)
        from .geometry import polar_dual
        ppolar = polar_dual(v.mesh.domain)
        L = 1.10 * float(v.values.max()) * ppolar.vertex_norm_max
    L = max(L, 1e-6)
    pad = 2.0 * L / (res - 1)
    lo = np.full(n, -L - pad)
    hi = np.full(n, L + pad)
    return BoxGrid(lo, hi, (res,) * n)


@dataclass(frozen=True)
class OmegaRegion:
    """Free boundary region {w < 0} extracted from a dual grid."""

    dim: int
    contour: np.ndarray          # (m, dim) loop points (2-D) or [[a],[b]] (1-D)
    inside_nodes: np.ndarray     # grid nodes with w < 0
    w_origin: float
    grid_cell: float

    @property
    def delta(self) -> float:
        return -self.w_origin

    def contour_radii(self):
        return np.linalg.norm(self.contour, axis=1)

    def diameter(self) -> float:
        if len(self.contour) < 2:
            return 0.0
        d = self.contour[:, None, :] - self.contour[None, :, :]
        return float(np.sqrt((d ** 2).sum(-1)).max())

    def to_dict(self):
        return {"dim": self.dim, "contour": self.contour.tolist(),
                "w_origin": self.w_origin}


@dataclass(frozen=True)
class LegendrePair:
    """Matched primal/dual pair with the extracted free boundary."""

    v: DiscreteConvexFunction
    u: GridFunction
    w_values: np.ndarray
    omega: OmegaRegion
    omega_prime: Optional[object] = None


def w_on_grid(v: DiscreteConvexFunction, cone: ConeSpec, grid: BoxGrid):
    u_vals, _ = legendre_max(v.mesh.nodes, v.values, grid.nodes)
    w_vals = u_vals + cone.polar_support(grid.nodes)
    return u_vals, w_vals


def _contour_points_2d(grid: BoxGrid, w):
    mx, my = grid.shape
    W = w.reshape(mx, my)
    xs, ys = grid.axes
    pts = []
    # vertical-direction edges (varying j)
    sign = W < 0
    for i in range(mx):
        for j in range(my - 1):
            if sign[i, j] != sign[i, j + 1]:
                t = W[i, j] / (W[i, j] - W[i, j + 1])
                pts.append([xs[i], ys[j] + t * (ys[j + 1] - ys[j])])
    for j in range(my):
        for i in range(mx - 1):
            if sign[i, j] != sign[i + 1, j]:
                t = W[i, j] / (W[i, j] - W[i + 1, j])
                pts.append([xs[i] + t * (xs[i + 1] - xs[i]), ys[j]])
    return np.array(pts)


def extract_free_boundary(v: DiscreteConvexFunction, cone: ConeSpec, grid: BoxGrid,
                          w_vals=None):
    """Sublevel contour of w = u + phi_polar by per-edge linear interpolation.

    Raises EmptyInterior when w >= 0 on the whole grid (inadmissible scale).
    The slice of the region with the free subspace, when the cone splits, is
    extracted separately by exact bisection along the slice axis.
    """
    if w_vals is None:
        _, w_vals = w_on_grid(v, cone, grid)
    u0, _ = legendre_max(v.mesh.nodes, v.values, np.zeros((1, grid.dim)))
    w0 = float(u0[0] + cone.polar_support_one(np.zeros(grid.dim)))
    inside = grid.nodes[w_vals < 0.0]
    if len(inside) == 0:
        raise EmptyInterior("w >= 0 on the entire dual grid")
    cell = float(np.max(grid.spacing))
    if grid.dim == 1:
        x = grid.nodes[:, 0]
        w = w_vals
        neg = np.where(w < 0)[0]
        i0, i1 = neg[0], neg[-1]
        a = x[i0] if i0 == 0 else x[i0 - 1] + (x[i0] - x[i0 - 1]) * w[i0 - 1] / (w[i0 - 1] - w[i0])
        b = x[i1] if i1 == len(x) - 1 else x[i1] + (x[i1 + 1] - x[i1]) * w[i1] / (w[i1] - w[i1 + 1])
        contour = np.array([[a], [b]])
    else:
        pts = _contour_points_2d(grid, w_vals)
        if len(pts) < 3:
            raise EmptyInterior("free boundary collapsed to fewer than 3 points")
        center = inside.mean(axis=0)
        ang = np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0])
        contour = pts[np.argsort(ang)]
    omega = OmegaRegion(grid.dim, contour, inside, w0, cell)
    return omega


def slice_interval(v: DiscreteConvexFunction, cone: ConeSpec, span=None, samples=512):
    """The 1-D slice {u < 0} along the free axis of a split cone.

    Exact up to bisection tolerance: u is evaluated through the Legendre max
    formula, and on the annihilator subspace w = u.
    """
    n = v.mesh.n
    k = cone.split_k
    if k is None or n - k != 1:
        raise NotImplementedError("slice extraction supports one free direction")

    def u_at(ts):
        pts = np.zeros((len(ts), n))
        pts[:, -1] = ts
        vals, _ = legendre_max(v.mesh.nodes, v.values, pts)
        return vals

    if span is None:
        span = 1.25 * float(v.values.max()) * max(
            1.0 / max(abs(float(v.mesh.domain.bounding_box()[0][-1])), 1e-12),
            1.0 / max(abs(float(v.mesh.domain.bounding_box()[1][-1])), 1e-12),
        )
    ts = np.linspace(-span, span, samples)
    w = u_at(ts)
    neg = np.where(w < 0)[0]
    if len(neg) == 0:
        raise EmptyInterior("slice of the free boundary region is empty")

    def bisect(lo, hi):
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if u_at(np.array([mid]))[0] < 0:
                hi = mid
            else:
                lo = mid
        return 0.5 * (lo + hi)

    a = ts[neg[0]] if neg[0] == 0 else -bisect(-ts[neg[0]], -ts[neg[0] - 1])
    b = ts[neg[-1]] if neg[-1] == len(ts) - 1 else bisect(ts[neg[-1]], ts[neg[-1] + 1])
    return float(a), float(b)


# ---------------------------------------------------------------------------
# smoothing for finite-difference verification
# ---------------------------------------------------------------------------

def smoothed_extension(dcf: DiscreteConvexFunction, width_cells=2.0, factor=4):
    """Mollified evaluator of the convex extension of a nodal function.

    The PL function is extended to all of R^n as the max of its envelope
    planes, resampled on a fine regular grid, convolved with a Gaussian of
    width ``width_cells`` mesh cells, and interpolated with cubic splines.
    Returns (callable on (m, n) arrays, reported smoothing width).
    """
    from scipy.interpolate import RegularGridInterpolator
    from scipy.ndimage import gaussian_filter

    mesh = dcf.mesh
    g, c = envelope_planes(mesh.nodes, dcf.values)
    lo, hi = mesh.domain.bounding_box()
    h_mesh = float(np.max(hi - lo)) / (mesh.res - 1)
    pad = 4.0 * width_cells * h_mesh
    fine = factor * mesh.res
    axes = [np.linspace(lo[d] - pad, hi[d] + pad, fine) for d in range(mesh.n)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gg.ravel() for gg in grids], axis=1)
    vals = eval_planes(g, c, pts).reshape([fine] * mesh.n)
    h_fine = float(axes[0][1] - axes[0][0])
    sigma = width_cells * h_mesh / h_fine
    sm = gaussian_filter(vals, sigma=sigma, mode="nearest")
    interp = RegularGridInterpolator(axes, sm, method="cubic")

    def evaluator(points):
        return interp(np.atleast_2d(points))

    return evaluator, width_cells * h_mesh
