"""Convex geometry for polytopes, exact at vertices.

A bounded convex body is carried as a matched vertex list / halfspace list
pair, cross-validated at construction.  Support functions are vertex maxima,
polar duals swap vertices and facets, so every geometric predicate used by the
solver (obliqueness margins, roundness constants, dual cones) is evaluated
without quadrature error.  Angular extrema of support-function combinations
are the one exception: they are sampled over facet normals, vertex directions
and a dense uniform fan, then locally polished in 2-D.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, QhullError

from .errors import (
    DegenerateBody,
    EmptySlice,
    InconsistentPredicates,
    NotOblique,
    OriginNotInterior,
)

VERTEX_TOL = 1e-10        # dedup tolerance in hull computations
CONTAIN_TOL = 1e-9
ANGULAR_SAMPLES = 4096    # uniform directions for angular extrema, n <= 3


def _dedup_points(pts, tol=VERTEX_TOL):
    """Drop points closer than ``tol`` to an earlier point (order preserved)."""
    kept = []
    for p in np.asarray(pts, dtype=float):
        if not any(np.max(np.abs(p - q)) <= tol for q in kept):
            kept.append(p)
    return np.array(kept)


@dataclass(frozen=True)
class Polytope:
    """Bounded convex body with matched vertex and halfspace descriptions.

    Halfspaces are stored with unit normals, so ``offsets[i]`` is the support
    value in direction ``normals[i]`` and ``offsets - normals @ y`` is the
    vector of facet distances of an interior point ``y``.
    """

    dim: int
    vertices: np.ndarray   # (m, dim)
    normals: np.ndarray    # (f, dim), unit rows, <a, y> <= b
    offsets: np.ndarray    # (f,)

    # -- constructors ------------------------------------------------------

    @staticmethod
    def from_vertices(points) -> "Polytope":
        pts = _dedup_points(points)
        if pts.ndim != 2:
            raise DegenerateBody("vertex array must be two-dimensional")
        dim = pts.shape[1]
        if dim == 1:
            lo, hi = float(pts.min()), float(pts.max())
            if hi - lo <= VERTEX_TOL:
                raise DegenerateBody("interval has empty interior")
            verts = np.array([[lo], [hi]])
            normals = np.array([[1.0], [-1.0]])
            offsets = np.array([hi, -lo])
            return Polytope(1, verts, normals, offsets)
        try:
            hull = ConvexHull(pts)
        except QhullError as exc:
            raise DegenerateBody(f"degenerate vertex set: {exc}") from exc
        verts = pts[hull.vertices]
        # Qhull equations are A y + b <= 0 with |A row| = 1.
        eqs = _dedup_points(hull.equations, tol=1e-12)
        normals = eqs[:, :dim]
        offsets = -eqs[:, dim]
        poly = Polytope(dim, verts, normals, offsets)
        poly._validate()
        return poly

    @staticmethod
    def from_halfspaces(normals, offsets) -> "Polytope":
        normals = np.asarray(normals, dtype=float)
        offsets = np.asarray(offsets, dtype=float)
        scale = np.linalg.norm(normals, axis=1)
        if np.any(scale <= 0):
            raise DegenerateBody("zero halfspace normal")
        normals = normals / scale[:, None]
        offsets = offsets / scale
        dim = normals.shape[1]
        if dim == 1:
            ups = offsets[normals[:, 0] > 0]
            los = -offsets[normals[:, 0] < 0]
            if ups.size == 0 or los.size == 0:
                raise DegenerateBody("interval halfspaces unbounded")
            hi, lo = float(ups.min()), float(los.max())
            if hi - lo <= VERTEX_TOL:
                raise DegenerateBody("interval has empty interior")
            return Polytope.from_vertices([[lo], [hi]])
        center, radius = chebyshev_center(normals, offsets)
        if radius <= VERTEX_TOL:
            raise DegenerateBody("halfspace intersection has empty interior")
        # Vertex enumeration: intersect each dim-subset is wasteful; use the
        # dual trick: vertices of K are polar facets of (K - c) polar.
        shifted = offsets - normals @ center
        dual_pts = normals / shifted[:, None]
        hull = ConvexHull(dual_pts)
        eqs = hull.equations
        verts = -eqs[:, :dim] / eqs[:, dim][:, None] + center
        return Polytope.from_vertices(_dedup_points(verts))

    @staticmethod
    def box(lo, hi) -> "Polytope":
        """Axis-aligned box with corners lo, hi (arrays of equal length)."""
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        grids = np.meshgrid(*[np.array([a, b]) for a, b in zip(lo, hi)], indexing="ij")
        corners = np.stack([g.ravel() for g in grids], axis=1)
        return Polytope.from_vertices(corners)

    @staticmethod
    def cube(half, dim) -> "Polytope":
        return Polytope.box([-half] * dim, [half] * dim)

    def _validate(self):
        # every vertex satisfies every halfspace; every facet is supported
        slack = self.offsets[None, :] - self.vertices @ self.normals.T
        if slack.min() < -1e3 * CONTAIN_TOL * max(1.0, float(np.abs(self.offsets).max())):
            raise InconsistentPredicates(
                f"vertex violates halfspace by {-slack.min():.3e}"
            )
        touched = np.sum(slack <= 1e-7 * max(1.0, float(np.abs(self.offsets).max())), axis=0)
        if np.any(touched < self.dim):
            raise InconsistentPredicates("halfspace not supported by enough vertices")

    # -- basic queries -----------------------------------------------------

    def contains(self, points, tol=CONTAIN_TOL):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        slack = self.offsets[None, :] - pts @ self.normals.T
        return np.all(slack >= -tol, axis=1)

    def boundary_distance(self, points):
        """Signed distance to the boundary, positive inside."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.min(self.offsets[None, :] - pts @ self.normals.T, axis=1)

    def support(self, x) -> float:
        """Support function: max over vertices of <x, v>."""
        return float(np.max(self.vertices @ np.asarray(x, dtype=float)))

    def support_many(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.max(X @ self.vertices.T, axis=1)

    def support_argmax(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        prods = X @ self.vertices.T
        idx = np.argmax(prods, axis=1)
        return prods[np.arange(len(X)), idx], idx

    @property
    def diameter(self) -> float:
        d = self.vertices[:, None, :] - self.vertices[None, :, :]
        return float(np.sqrt((d ** 2).sum(-1)).max())

    @property
    def vertex_norm_max(self) -> float:
        return float(np.linalg.norm(self.vertices, axis=1).max())

    def volume(self) -> float:
        if self.dim == 1:
            return float(self.vertices.max() - self.vertices.min())
        return float(ConvexHull(self.vertices).volume)

    def centroid(self):
        if self.dim == 1:
            return np.array([0.5 * float(self.vertices.min() + self.vertices.max())])
        hull = ConvexHull(self.vertices)
        pts = self.vertices
        ref = pts.mean(axis=0)
        vol_total = 0.0
        cen = np.zeros(self.dim)
        for simplex in hull.simplices:
            verts = pts[simplex]
            mat = verts - ref
            vol = abs(np.linalg.det(mat)) / math.factorial(self.dim)
            c = (verts.sum(axis=0) + ref) / (self.dim + 1)
            vol_total += vol
            cen += vol * c
        return cen / vol_total

    def translate(self, shift) -> "Polytope":
        shift = np.asarray(shift, dtype=float)
        return Polytope(
            self.dim,
            self.vertices + shift,
            self.normals,
            self.offsets + self.normals @ shift,
        )

    def scale(self, factor) -> "Polytope":
        return Polytope(self.dim, self.vertices * factor, self.normals, self.offsets * factor)

    def bounding_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        return {"dim": self.dim, "vertices": self.vertices.tolist()}

    @staticmethod
    def from_dict(data) -> "Polytope":
        return Polytope.from_vertices(np.asarray(data["vertices"], dtype=float))


def chebyshev_center(normals, offsets):
    """Center and radius of the largest ball inside {normals @ y <= offsets}."""
    f, dim = normals.shape
    c = np.zeros(dim + 1)
    c[-1] = -1.0
    A = np.hstack([normals, np.ones((f, 1))])
    res = linprog(c, A_ub=A, b_ub=offsets, bounds=[(None, None)] * dim + [(0, None)],
                  method="highs")
    if not res.success:
        raise DegenerateBody(f"chebyshev center LP failed: {res.message}")
    return res.x[:dim], float(res.x[-1])


def polar_dual(K: Polytope) -> Polytope:
    """Polar dual body {x : support_K(x) <= 1}.

    Exact by duality: facets of K become vertices of the dual and vice versa.
    Requires the origin strictly inside K.
    """
    if np.any(K.offsets <= CONTAIN_TOL):
        raise OriginNotInterior("polar dual needs 0 in the interior")
    verts = K.normals / K.offsets[:, None]
    scale = np.linalg.norm(K.vertices, axis=1)
    if np.any(scale <= CONTAIN_TOL):
        # a vertex at the origin would give a vacuous halfspace
        raise OriginNotInterior("vertex at the origin")
    normals = K.vertices / scale[:, None]
    offsets = 1.0 / scale
    dual = Polytope(K.dim, verts, normals, offsets)
    dual._validate()
    return dual


@dataclass(frozen=True)
class ConeSpec:
    """Cone over a convex body, possibly split as (body in R^k) x R^(n-k).

    ``link`` is the compact factor: the full link when ``split_k`` is None,
    otherwise the k-dimensional factor whose polar carries the whole polar of
    the split link.  The cone lives in R^(n+1).
    """

    link: Polytope
    n: int
    split_k: Optional[int] = None

    def __post_init__(self):
        k = self.k_eff
        if self.link.dim != k:
            raise DegenerateBody(
                f"link dimension {self.link.dim} does not match compact factor {k}"
            )
        if self.split_k is not None and not (1 <= self.split_k <= self.n):
            raise DegenerateBody("split_k out of range")
        object.__setattr__(self, "_link_polar", polar_dual(self.link))

    @property
    def k_eff(self) -> int:
        return self.n if self.split_k is None else self.split_k

    @property
    def link_polar(self) -> Polytope:
        return self._link_polar

    def polar_support(self, X):
        """Support function of the polar of the link, phi_{Sigma_polar}.

        For split cones the polar lives in the first k coordinates and the
        support ignores the free factor.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self._link_polar.support_many(X[:, : self.k_eff])

    def polar_support_one(self, x) -> float:
        return float(self.polar_support(np.atleast_2d(x))[0])

    def contains_cone_point(self, points, tol=CONTAIN_TOL):
        """Membership in the cone {(x, h) : h >= phi_polar(x)} for points in R^(n+1)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        heights = pts[:, -1]
        return heights >= self.polar_support(pts[:, :-1]) - tol

    def to_dict(self):
        return {"link": self.link.to_dict(), "n": self.n, "split_k": self.split_k}


@dataclass(frozen=True)
class ObliquenessReport:
    mode: str      # 'strong' | 'partial' | 'fails'
    margin: float  # min over vertex pairs of <x, y> + 1
    r: float
    R: float

    def to_dict(self):
        return {"mode": self.mode, "margin": self.margin, "r": self.r, "R": self.R}


def uniform_directions(dim, count=ANGULAR_SAMPLES):
    """Deterministic quasi-uniform unit directions."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        t = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False)
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    if dim == 3:
        i = np.arange(count, dtype=float)
        golden = (1.0 + 5.0 ** 0.5) / 2.0
        z = 1.0 - 2.0 * (i + 0.5) / count
        rho = np.sqrt(np.maximum(0.0, 1.0 - z ** 2))
        phi = 2.0 * np.pi * i / golden
        return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    raise NotImplementedError("angular sampling implemented for dim <= 3")


def _candidate_directions(bodies, count=ANGULAR_SAMPLES):
    dim = bodies[0].dim
    dirs = [uniform_directions(dim, count)]
    for body in bodies:
        dirs.append(body.normals)
        scale = np.linalg.norm(body.vertices, axis=1)
        good = scale > CONTAIN_TOL
        dirs.append(body.vertices[good] / scale[good, None])
    return np.vstack(dirs)


def _polish_extremum(func, theta0, minimize=True, rounds=3, width=None, samples=201):
    """Refine an angular extremum of a 2-D direction function near theta0."""
    if width is None:
        width = 2.0 * np.pi / ANGULAR_SAMPLES
    best_t = theta0
    for _ in range(rounds):
        ts = best_t + np.linspace(-width, width, samples)
        dirs = np.stack([np.cos(ts), np.sin(ts)], axis=1)
        vals = func(dirs)
        idx = int(np.argmin(vals) if minimize else np.argmax(vals))
        best_t = ts[idx]
        width /= 20.0
    return func(np.array([[np.cos(best_t), np.sin(best_t)]]))[0]


def _angular_extremum(func, dirs, minimize=True):
    vals = func(dirs)
    idx = int(np.argmin(vals) if minimize else np.argmax(vals))
    val = float(vals[idx])
    if dirs.shape[1] == 2:
        theta0 = float(np.arctan2(dirs[idx, 1], dirs[idx, 0]))
        val2 = float(_polish_extremum(func, theta0, minimize=minimize))
        val = min(val, val2) if minimize else max(val, val2)
    return val


def roundness_constants(P: Polytope, Sigma: Polytope):
    """Constants (r, R) squeezing the free boundary between balls.

    1/R is the angular infimum of phi_polar(theta) - phi_P(-theta), 1/r the
    supremum of phi_P(theta) + phi_polar(theta); the free boundary of any
    admissible function then satisfies B(delta r) inside Omega inside
    B(delta R) with delta = |w(0)|.  Raises NotOblique when the infimum is
    not positive.
    """
    sig_polar = polar_dual(Sigma)
    dirs = _candidate_directions([P, sig_polar])

    def lower(d):
        return sig_polar.support_many(d) - P.support_many(-d)

    def upper(d):
        return P.support_many(d) + sig_polar.support_many(d)

    inv_R = _angular_extremum(lower, dirs, minimize=True)
    inv_r = _angular_extremum(upper, dirs, minimize=False)
    if inv_R <= 0.0:
        raise NotOblique(f"roundness infimum {inv_R:.3e} <= 0")
    return 1.0 / inv_r, 1.0 / inv_R


def _pair_margin(A: Polytope, B: Polytope) -> float:
    """min over vertex pairs of <x, y> + 1 (exact: bilinear min at vertices)."""
    return float((A.vertices @ B.vertices.T).min() + 1.0)


def check_strong_obliqueness(P: Polytope, Sigma: Polytope) -> ObliquenessReport:
    """Strong obliqueness of the link pair.

    Evaluates the vertex-pair margin and cross-checks the two equivalent
    containments (-P inside the interior of the polar of Sigma, and the
    symmetric one); any disagreement is a geometry bug, not a property of the
    input, and raises InconsistentPredicates.
    """
    margin = _pair_margin(P, Sigma)
    by_margin = margin > 0.0
    # -P inside int(Sigma polar)  <=>  sup_Sigma <-p, x> < 1 for all vertices p
    in_sig_polar = bool(np.all(Sigma.support_many(-P.vertices) < 1.0 - 0.0))
    in_p_polar = bool(np.all(P.support_many(-Sigma.vertices) < 1.0 - 0.0))
    checks = {by_margin, in_sig_polar, in_p_polar}
    if len(checks) != 1:
        # allow exact-boundary ties to disagree only within tolerance
        if abs(margin) > 10 * CONTAIN_TOL:
            raise InconsistentPredicates(
                f"margin test {by_margin} vs containments "
                f"({in_sig_polar}, {in_p_polar}) at margin {margin:.3e}"
            )
        by_margin = False
    if not by_margin:
        return ObliquenessReport("fails", margin, 0.0, 0.0)
    r, R = roundness_constants(P, Sigma)
    return ObliquenessReport("strong", margin, r, R)


def slice_with_subspace(P: Polytope, k: int) -> Polytope:
    """Intersection of P with the span of the first k coordinates, as a body in R^k."""
    normals = P.normals[:, :k]
    offsets = P.offsets.copy()
    scale = np.linalg.norm(normals, axis=1)
    keep = scale > 1e-13
    if not np.any(keep):
        raise EmptySlice("slice unconstrained; source body malformed")
    try:
        return Polytope.from_halfspaces(normals[keep], offsets[keep])
    except DegenerateBody as exc:
        raise EmptySlice(f"slice has empty interior: {exc}") from exc


def check_partial_obliqueness(P: Polytope, Sigma: ConeSpec) -> ObliquenessReport:
    """Strong partial obliqueness for a split target cone.

    Runs the vertex-pair margin test between the slice of P with the compact
    subspace and the compact factor of Sigma, and fills the fiberwise
    roundness constants: 1/R over unit directions of the compact subspace,
    1/r over all unit directions.
    """
    k = Sigma.k_eff
    if k == P.dim:
        rep = check_strong_obliqueness(P, Sigma.link)
        mode = "partial" if rep.mode == "strong" else rep.mode
        return ObliquenessReport(mode, rep.margin, rep.r, rep.R)
    P_slice = slice_with_subspace(P, k)
    margin = _pair_margin(P_slice, Sigma.link)
    sig_polar = Sigma.link_polar
    dirs_k = _candidate_directions([P_slice, sig_polar])

    def lower(d):
        return sig_polar.support_many(d) - P_slice.support_many(-d)

    inv_R = _angular_extremum(lower, dirs_k, minimize=True)
    if (margin > 0.0) != (inv_R > 0.0) and abs(margin) > 10 * CONTAIN_TOL:
        raise InconsistentPredicates(
            f"slice margin {margin:.3e} disagrees with fiber infimum {inv_R:.3e}"
        )
    if margin <= 0.0:
        return ObliquenessReport("fails", margin, 0.0, 0.0)

    dirs_n = _candidate_directions([P])

    def upper(d):
        return P.support_many(d) + Sigma.polar_support(d)

    inv_r = _angular_extremum(upper, dirs_n, minimize=False)
    return ObliquenessReport("partial", margin, 1.0 / inv_r, 1.0 / inv_R)


def minkowski_support(bodies, X):
    """Support function of a Minkowski sum: the exact sum of supports."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    total = np.zeros(len(X))
    for body in bodies:
        total += body.support_many(X)
    return total


def john_translate(K: Polytope, tol=1e-8, max_passes=4):
    """Translation x0 putting the maximum-volume inscribed ellipsoid at 0.

    Solves max log det B subject to |B a_i| + <a_i, d> <= b_i with a conic
    solver, then re-centers and re-solves until the center moves by less than
    ``tol`` times the diameter.
    """
    _, radius = chebyshev_center(K.normals, K.offsets)
    scale = K.diameter
    if radius <= VERTEX_TOL * max(1.0, scale):
        raise DegenerateBody("john_translate on a body with empty interior")
    if K.dim == 1:
        lo, hi = float(K.vertices.min()), float(K.vertices.max())
        center = np.array([0.5 * (lo + hi)])
        return center, K.translate(-center)

    import cvxpy as cp

    total = np.zeros(K.dim)
    body = K
    for _ in range(max_passes):
        B = cp.Variable((K.dim, K.dim), PSD=True)
        d = cp.Variable(K.dim)
        cons = [
            cp.norm(B @ body.normals[i], 2) + body.normals[i] @ d <= body.offsets[i]
            for i in range(len(body.offsets))
        ]
        prob = cp.Problem(cp.Minimize(-cp.log_det(B)), cons)
        try:
            # ask past the solver's clean-convergence floor; AlmostOptimal is
            # still far more accurate than the loop tolerance needs
            import warnings as _warnings
            with _warnings.catch_warnings():
                _warnings.simplefilter("ignore")
                prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12,
                           tol_feas=1e-12)
        except cp.error.SolverError:
            prob.solve(solver=cp.SCS, eps=1e-9)
        if d.value is None:
            raise DegenerateBody("inscribed ellipsoid solve failed")
        step = np.asarray(d.value, dtype=float)
        total += step
        body = body.translate(-step)
        if np.linalg.norm(step) <= tol * scale:
            break
    return total, body
