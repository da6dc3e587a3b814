"""Projected-descent minimization of the energy over discrete convex functions.

Each accepted iterate is produced by the composite map
    step along the preconditioned negative gradient
    -> lower convex envelope projection
    -> (split targets) boundary renormalization and barycenter translation
    -> closed-form rescale to the optimal ray point,
and the Armijo backtracking line search measures decrease of the composite,
so the energy of accepted iterates is monotone by construction.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .convexfn import (
    DiscreteConvexFunction,
    LegendrePair,
    LinkMesh,
    OmegaRegion,
    convexify,
    extract_free_boundary,
    legendre_max,
    slice_interval,
    GridFunction,
)
from .densities import (
    HomogeneousDensity,
    check_vanishing_order,
    estimate_vanishing_order,
)
from .energy import (
    CoercivityConstants,
    DualData,
    EnergyContext,
    EnergyReport,
    coercivity_constants,
    neumaier_sum,
)
from .errors import (
    DivergentEnergy,
    EmptyInterior,
    EnergyUndefined,
    HypothesisViolated,
    NewtonStall,
    NoConvergence,
    NonPositiveV,
    NotOblique,
)
from .geometry import (
    ConeSpec,
    ObliquenessReport,
    Polytope,
    check_partial_obliqueness,
    check_strong_obliqueness,
)

log = logging.getLogger(__name__)


@dataclass
class SolveConfig:
    mode: str = "strong"              # 'strong' | 'partial'
    mesh: int = 33
    dual_res: Optional[int] = None
    max_iters: int = 500
    grad_tol: float = 1e-6
    progress_window: int = 25
    progress_tol: float = 2e-6
    armijo_c1: float = 1e-4
    armijo_shrink: float = 0.5
    armijo_grow: float = 1.4
    max_backtracks: int = 40
    normalization_tol: float = 1e-10
    v_floor_rel: float = 1e-8
    stall_grad_cap: float = 5.0
    seed: int = 0
    alarm_margin: float = 1e-6
    alarm_floor_partial: float = -50.0
    certificate_directions: int = 20
    certificate_tol_factor: float = 10.0
    health_v0_ratio_cap: float = 50.0
    doubling_trials: int = 0          # 0 skips the doubling evidence pass
    doubling_cap: float = 1e6

    def validate(self):
        if self.mode not in ("strong", "partial"):
            raise HypothesisViolated(f"unknown mode {self.mode!r}")
        for name in ("grad_tol", "normalization_tol", "armijo_c1"):
            if getattr(self, name) <= 0:
                raise HypothesisViolated(f"{name} must be positive")


@dataclass
class NormalizationState:
    x0_prime: np.ndarray
    newton_residual: float
    john_translation: np.ndarray
    iterations: int = 0
    min_jacobian_eig: float = float("nan")

    def to_dict(self):
        return {"x0_prime": self.x0_prime.tolist(),
                "newton_residual": self.newton_residual,
                "john_translation": self.john_translation.tolist(),
                "iterations": self.iterations,
                "min_jacobian_eig": self.min_jacobian_eig}


@dataclass
class IterationRecord:
    iteration: int
    I: float
    J: float
    E: float
    t_star: float
    grad_norm: float
    step: float
    normalization_residual: float
    omega_diameter: float

    def to_dict(self):
        return self.__dict__.copy()


@dataclass
class SolutionBundle:
    """Converged minimizer with its dual data and certificates."""

    v: DiscreteConvexFunction
    u: GridFunction
    omega: OmegaRegion
    report: EnergyReport
    obliqueness: ObliquenessReport
    config: SolveConfig
    history: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    stationarity: list = field(default_factory=list)
    stationarity_fine: list = field(default_factory=list)
    sandwich: Optional[dict] = None
    normalization: Optional[NormalizationState] = None
    health: dict = field(default_factory=dict)
    coercivity: Optional[CoercivityConstants] = None
    omega_prime: Optional[tuple] = None
    stall_events: int = 0
    converged_via: str = "max_iters" 

    @property
    def mesh(self) -> LinkMesh:
        return self.v.mesh


# ---------------------------------------------------------------------------
# normalization machinery for split targets
# ---------------------------------------------------------------------------

def _prime_coords(mesh: LinkMesh, k: int):
    return mesh.nodes[:, k:]


def barycenter_residual(ctx: EnergyContext, v: DiscreteConvexFunction, k: int):
    """Barycenter of the J-variation measure in the free directions."""
    rule = ctx.mesh.quad
    vq = rule.interpolate(v.values)
    expo = ctx.n + 2 + ctx.alpha
    dens = rule.weights * ctx._hP_fine * vq ** (-expo)
    prime = rule.points[:, k:]
    psi = np.array([neumaier_sum(dens * prime[:, j]) for j in range(prime.shape[1])])
    total = neumaier_sum(dens)
    return psi, total


def normalize_translation(ctx: EnergyContext, v: DiscreteConvexFunction,
                          tol=1e-10, max_iters=100):
    """Translate v by an affine function so its J-measure is prime-centered.

    Damped Newton on Psi(x') = int y' h (v - <x', y>)^-(n+2+a) dy with the
    positive-definite Jacobian (n+2+a) int h (v - <x',y>)^-(n+3+a) <xi,y'>^2.
    The step is damped to keep v - <x', y> positive (the map blows up at the
    slice boundary, which is also the uniqueness barrier).
    """
    k = ctx.cone.split_k
    if k is None:
        raise HypothesisViolated("translation normalization needs a split target")
    mesh = ctx.mesh
    rule = mesh.quad
    prime = rule.points[:, k:]
    m = prime.shape[1]
    expo = ctx.n + 2 + ctx.alpha
    x0 = np.zeros(m)
    vals0 = rule.interpolate(v.values)
    hw = rule.weights * ctx._hP_fine

    def residual(x):
        shifted = vals0 - prime @ x
        if shifted.min() <= 0:
            return None, None, shifted
        dens = hw * shifted ** (-expo)
        psi = np.array([neumaier_sum(dens * prime[:, j]) for j in range(m)])
        total = neumaier_sum(dens)
        return psi, total, shifted

    psi, total, shifted = residual(x0)
    if psi is None:
        raise NewtonStall("initial point already outside the positivity barrier")
    scale = max(total, 1e-300) * max(1.0, mesh.domain.diameter)
    best = np.max(np.abs(psi)) / scale
    dens_j0 = hw * shifted ** (-(expo + 1.0))
    jac0 = expo * np.einsum("q,qi,qj->ij", dens_j0, prime, prime)
    min_eig = float(np.linalg.eigvalsh(jac0).min())
    it = 0
    stall = 0
    while best > tol and it < max_iters:
        dens_j = hw * shifted ** (-(expo + 1.0))
        jac = expo * np.einsum("q,qi,qj->ij", dens_j, prime, prime)
        eigs = np.linalg.eigvalsh(jac)
        min_eig = float(eigs.min())
        if min_eig <= 0:
            raise NewtonStall(
                "normalization Jacobian lost positive definiteness; the "
                "J-barrier diverges at the slice boundary, so the iterate "
                "left the admissible region")
        step = np.linalg.solve(jac, -psi)
        lam = 1.0
        accepted = False
        for _ in range(60):
            cand = x0 + lam * step
            psi_c, total_c, shifted_c = residual(cand)
            if psi_c is not None:
                res_c = np.max(np.abs(psi_c)) / scale
                if res_c < best:
                    x0, psi, total, shifted = cand, psi_c, total_c, shifted_c
                    best = res_c
                    accepted = True
                    break
            lam *= 0.5
        it += 1
        if not accepted:
            stall += 1
            if stall >= 3:
                raise NewtonStall(
                    f"barycenter residual stalled at {best:.3e} (barrier "
                    "diverges toward the slice boundary)")
        else:
            stall = 0
    x_full = np.zeros(ctx.n)
    x_full[k:] = x0
    state = NormalizationState(x_full, best, np.zeros(max(ctx.n - k, 1)), it, min_eig)
    return v.shift_linear(x_full), state


def boundary_renormalize(ctx: EnergyContext, v: DiscreteConvexFunction,
                         dual: DualData = None):
    """Rebuild v as the Legendre transform of u restricted to the closed
    sublevel region, then re-center with the barycenter translation.

    The rebuilt function never exceeds v, leaves I unchanged (u is unchanged
    on the region), and pins the boundary values to the support function of
    the slice of the region.  The supremum over the region is taken over the
    grid corners inside, the fine quadrature midpoints inside, and the free
    boundary contour points (where u = -phi_polar exactly).
    """
    if dual is None:
        dual = ctx.dual_data(v)
    grid = dual.grid
    inside = dual.w_corner <= 0.0
    candidates = [grid.nodes[inside]]
    u_cand = [dual.u_corner[inside]]
    in_pts = dual.w_pts < 0.0
    candidates.append(dual.points[in_pts])
    u_cand.append(dual.u_pts[in_pts])
    from .convexfn import _contour_points_2d
    if grid.dim == 2:
        pts = _contour_points_2d(grid, dual.w_corner)
    else:
        from .convexfn import extract_free_boundary as _efb
        region = _efb(v, ctx.cone, grid, dual.w_corner)
        pts = region.contour
    if len(pts):
        candidates.append(pts)
        u_cand.append(-ctx.cone.polar_support(pts))
    k = ctx.cone.split_k
    if k is not None and ctx.n - k == 1:
        a, b = slice_interval(v, ctx.cone)
        ends = np.zeros((2, ctx.n))
        ends[0, -1], ends[1, -1] = a, b
        candidates.append(ends)
        u_cand.append(np.zeros(2))
    X = np.vstack(candidates)
    uX = np.concatenate(u_cand)
    scores = ctx.mesh.nodes @ X.T - uX[None, :]
    rebuilt = np.max(scores, axis=1)
    rebuilt = np.minimum(rebuilt, v.values)
    v_tilde = convexify(ctx.mesh, rebuilt)
    if k is not None:
        v_tilde, state = normalize_translation(
            ctx, v_tilde, tol=getattr(ctx, "_norm_tol", 1e-10))
        return v_tilde, state
    return v_tilde, None


# ---------------------------------------------------------------------------
# descent loop
# ---------------------------------------------------------------------------

def _tangent_project(ctx: EnergyContext, v: DiscreteConvexFunction, grad, k: int):
    """Remove components of the nodal gradient along the constraint normals
    of the prime-barycenter condition (first-order tangency; the translation
    step restores the constraint exactly afterwards)."""
    rule = ctx.mesh.quad
    vq = rule.interpolate(v.values)
    expo = ctx.n + 3 + ctx.alpha
    dens = rule.weights * ctx._hP_fine * vq ** (-(expo - 1.0) - 1.0)
    prime = rule.points[:, k:]
    m = prime.shape[1]
    N = len(ctx.mesh.nodes)
    normals = np.zeros((m, N))
    for j in range(m):
        coeff = -(ctx.n + 2 + ctx.alpha) * dens * prime[:, j]
        for col in range(ctx.n + 1):
            np.add.at(normals[j], rule.node_idx[:, col], coeff * rule.bary[:, col])
    gram = normals @ normals.T
    rhs = normals @ grad
    try:
        lam = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        return grad
    return grad - normals.T @ lam


def _smooth_random_directions(mesh: LinkMesh, count, seed, interior_only=True):
    """Random low-frequency nodal fields, unit RMS, for certificates."""
    rng = np.random.default_rng(seed)
    lo, hi = mesh.domain.bounding_box()
    span = np.maximum(hi - lo, 1e-12)
    dirs = []
    for _ in range(count):
        y = (mesh.nodes - lo) / span
        coef = rng.standard_normal(6)
        freq = rng.integers(1, 3, size=2)
        f = coef[0] + coef[1] * y[:, 0] + coef[2] * y[:, -1] \
            + coef[3] * np.sin(np.pi * freq[0] * y[:, 0]) \
            + coef[4] * np.cos(np.pi * freq[1] * y[:, -1]) \
            + coef[5] * y[:, 0] * y[:, -1]
        if interior_only:
            f = np.where(mesh.interior_node, f, 0.0)
        nrm = np.sqrt(np.mean(f ** 2))
        if nrm > 1e-12:
            dirs.append(f / nrm)
    return dirs


class _Pipeline:
    """One normalization pipeline application: the composite map of a step.

    The rebuild from the closed sublevel region is applied in both modes: it
    leaves I unchanged, never decreases J (so never increases the energy) and
    revives nodes whose dual plane has gone inactive, which a pure gradient
    step cannot do.  Rescaling to the optimal ray point preserves the
    barycenter condition because the weight is homogeneous in v.
    """

    def __init__(self, ctx: EnergyContext, cfg: SolveConfig):
        self.ctx = ctx
        self.cfg = cfg
        self.partial = ctx.cone.split_k is not None

    def apply(self, values):
        """Returns the normalized iterate together with its dual data.

        In strong mode the rebuild leaves u unchanged on the closed region,
        so the pre-rebuild dual decomposition is exact for the rebuilt
        function and only needs the closed-form rescale afterwards.  The
        translation in split mode shifts the dual grid, so the dual is
        recomputed there.
        """
        ctx = self.ctx
        v = convexify(ctx.mesh, values)
        dual = ctx.dual_data(v, need_error=False)
        state = None
        v, state = boundary_renormalize(ctx, v, dual)
        if self.partial:
            dual = ctx.dual_data(v, need_error=False)
        rep_J, _ = ctx.J_value(v)
        t = ctx.t_star(rep_J)
        v = v.scale(t)
        dual = dual.scaled(t)
        return v, state, dual


def _health_partial(ctx, v, dual, cfg):
    k = ctx.cone.split_k
    a, b = slice_interval(v, ctx.cone)
    # u on the slice, minimized over a fine sample
    ts = np.linspace(a, b, 257)[1:-1]
    pts = np.zeros((len(ts), ctx.n))
    pts[:, -1] = ts
    u_slice, _ = legendre_max(ctx.mesh.nodes, v.values, pts)
    inf_u_slice = float(u_slice.min())
    diam = b - a
    v0 = v.value_at_origin()
    inf_v = v.min_value
    return {
        "omega_prime": (a, b),
        "inf_u_slice": inf_u_slice,
        "omega_prime_diameter": diam,
        "john_center": 0.5 * (a + b),
        "v0_over_inf": v0 / max(inf_v, 1e-300),
        "pinch_lower_ok": bool(abs(inf_u_slice) <= 2.0 * diam + 1e-9),
        "v0_ratio_ok": bool(v0 / max(inf_v, 1e-300) <= cfg.health_v0_ratio_cap),
    }


class _LbfgsMemory:
    """Two-loop L-BFGS recursion over the analytic nodal gradient.

    The plain projected gradient is the prescribed direction but converges
    too slowly across the stiff/flat spectrum of the discrete energy; the
    memory rescales it without touching the projection or the line search.
    """

    def __init__(self, size=12):
        self.size = size
        self.s = []
        self.y = []

    def push(self, s, y):
        sy = float(np.dot(s, y))
        if sy > 1e-14 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            self.s.append(s)
            self.y.append(y)
            if len(self.s) > self.size:
                self.s.pop(0)
                self.y.pop(0)

    def reset(self):
        self.s, self.y = [], []

    def direction(self, grad):
        q = grad.copy()
        alphas = []
        for s, y in zip(reversed(self.s), reversed(self.y)):
            rho = 1.0 / np.dot(y, s)
            a = rho * np.dot(s, q)
            q -= a * y
            alphas.append((a, rho, s, y))
        if self.s:
            gamma = np.dot(self.s[-1], self.y[-1]) / np.dot(self.y[-1], self.y[-1])
            q *= gamma
        for a, rho, s, y in reversed(alphas):
            b = rho * np.dot(y, q)
            q += (a - b) * s
        return -q


def _run_descent(ctx: EnergyContext, cfg: SolveConfig, v0_values, obliq,
                 coerc: Optional[CoercivityConstants]):
    mesh = ctx.mesh
    pipe = _Pipeline(ctx, cfg)
    ctx._norm_tol = cfg.normalization_tol
    v, norm_state, dual = pipe.apply(v0_values)
    rep = ctx.energy(v, dual)
    alarm = coerc.alarm - cfg.alarm_margin * (1 + abs(coerc.alarm)) if coerc \
        else cfg.alarm_floor_partial
    history = []
    memory = _LbfgsMemory()
    stalls = 0
    converged = False
    via = "max_iters"
    it = 0
    grad = None
    prev = None
    step = 1.0
    E_window = []
    for it in range(1, cfg.max_iters + 1):
        grad, _ = ctx.gradient(v, dual)
        if pipe.partial:
            grad = _tangent_project(ctx, v, grad, ctx.cone.split_k)
        gnorm = ctx.grad_norm(grad)
        if prev is not None:
            memory.push(v.values - prev[0], grad - prev[1])
        prev = (v.values.copy(), grad.copy())
        norm_res = norm_state.newton_residual if norm_state else 0.0
        history.append(IterationRecord(it, rep.I, rep.J, rep.E, rep.t_star,
                                       gnorm, step, norm_res, 0.0))
        if rep.E < alarm:
            raise DivergentEnergy(
                f"energy {rep.E:.6f} fell below the theoretical floor {alarm:.6f}")
        if gnorm <= cfg.grad_tol:
            converged = True
            via = "gradient"
            break
        E_window.append(rep.E)
        if len(E_window) > cfg.progress_window:
            drop = E_window[-cfg.progress_window - 1] - rep.E
            if drop <= cfg.progress_tol * max(1.0, abs(rep.E)):
                converged = True
                via = "progress_floor"
                break
        direction = memory.direction(grad)
        pred = -float(np.dot(grad, direction))
        if pred <= 0 or not memory.s:
            memory.reset()
            # first step and resets: steepest descent scaled by 1/grad_norm
            direction = -grad / np.maximum(mesh.node_mass, 1e-300)
            direction /= max(float(np.linalg.norm(grad)), 1e-300)
            pred = -float(np.dot(grad, direction))
        accepted = False
        eta = 1.0
        for _ in range(cfg.max_backtracks):
            trial_values = v.values + eta * direction
            try:
                v_try, st_try, dual_try = pipe.apply(trial_values)
                rep_try = ctx.energy(v_try, dual_try)
            except (EnergyUndefined, NewtonStall, NonPositiveV, EmptyInterior):
                eta *= cfg.armijo_shrink
                continue
            if rep_try.E <= rep.E - cfg.armijo_c1 * eta * pred:
                v, dual, rep = v_try, dual_try, rep_try
                norm_state = st_try or norm_state
                step = eta
                accepted = True
                break
            eta *= cfg.armijo_shrink
        if not accepted:
            stalls += 1
            if stalls < 2:
                # retry once from a clean memory before giving up
                memory.reset()
                continue
            if gnorm <= cfg.stall_grad_cap:
                # the line search hit the sampling noise floor of the
                # composite map; stationary at this resolution
                converged = True
                via = "stall_floor"
            log.info("descent stalled at iteration %d (grad %.3e)", it, gnorm)
            break
    return v, dual, rep, history, converged, it, stalls, norm_state, grad, via


def _certificates(ctx, cfg, v, dual, grad):
    dirs = _smooth_random_directions(ctx.mesh, cfg.certificate_directions, cfg.seed + 1)
    if ctx.cone.split_k is not None:
        dirs = [_tangent_project(ctx, v, d, ctx.cone.split_k) for d in dirs]
        dirs = [d / max(np.sqrt(np.mean(d ** 2)), 1e-12) for d in dirs]
    vals = [float(np.dot(grad, d)) for d in dirs]

    fine_ctx = EnergyContext(ctx.mesh, ctx.cone, ctx.dens_P, ctx.dens_S,
                             dual_res=int(3.2 * ctx.dual_res),
                             roundness_R=ctx.R, v_floor=ctx.v_floor)
    grad_fine, _ = fine_ctx.gradient(v)
    vals_fine = [float(np.dot(grad_fine, d)) for d in dirs]
    return vals, vals_fine


def _sandwich_check(omega: OmegaRegion, obliq: ObliquenessReport):
    delta = omega.delta
    radii = omega.contour_radii()
    cell = omega.grid_cell
    return {
        "delta": delta,
        "inner": delta * obliq.r,
        "outer": delta * obliq.R,
        "min_radius": float(radii.min()),
        "max_radius": float(radii.max()),
        "cell": cell,
        "inner_ok": bool(radii.min() >= delta * obliq.r - cell),
        "outer_ok": bool(radii.max() <= delta * obliq.R + cell),
    }


def minimize_strong(P: Polytope, Sigma: Polytope,
                    dens_P: HomogeneousDensity, dens_S: HomogeneousDensity,
                    cfg: SolveConfig = None) -> SolutionBundle:
    """Minimize the energy for a compact target link under strong obliqueness."""
    cfg = cfg or SolveConfig()
    cfg.validate()
    obliq = check_strong_obliqueness(P, Sigma)
    if obliq.mode != "strong":
        raise NotOblique(f"pair fails strong obliqueness (margin {obliq.margin:.4f})")
    cone = ConeSpec(Sigma, n=P.dim)
    mesh = LinkMesh(P, cfg.mesh)
    ctx = EnergyContext(mesh, cone, dens_P, dens_S, dual_res=cfg.dual_res,
                        roundness_R=obliq.R,
                        v_floor=cfg.v_floor_rel * P.diameter)
    coerc = coercivity_constants(P, cone, dens_P, dens_S, obliq.R)
    v0 = np.ones(len(mesh.nodes))
    v, dual, rep, history, converged, iters, stalls, _, grad, via = _run_descent(
        ctx, cfg, v0, obliq, coerc)
    omega = extract_free_boundary(v, cone, dual.grid, dual.w_corner)
    stat, stat_fine = _certificates(ctx, cfg, v, dual, grad)
    bundle = SolutionBundle(
        v=v,
        u=GridFunction(dual.grid, dual.u_corner),
        omega=omega,
        report=ctx.report(v),
        obliqueness=obliq,
        config=cfg,
        history=history,
        converged=converged,
        iterations=iters,
        stationarity=stat,
        stationarity_fine=stat_fine,
        sandwich=_sandwich_check(omega, obliq),
        coercivity=coerc,
        stall_events=stalls,
        converged_via=via,
    )
    if not converged and grad is not None:
        gnorm = ctx.grad_norm(grad)
        if gnorm > 10 * cfg.grad_tol:
            raise NoConvergence(
                f"gradient norm {gnorm:.3e} above 10x tolerance after "
                f"{iters} iterations", bundle=bundle)
    return bundle


def minimize_partial(P: Polytope, cone: ConeSpec,
                     dens_P: HomogeneousDensity, dens_S: HomogeneousDensity,
                     cfg: SolveConfig = None) -> SolutionBundle:
    """Minimize over prime-normalized functions for a split target cone."""
    cfg = cfg or SolveConfig()
    cfg.mode = "partial"
    cfg.validate()
    if cone.split_k is None:
        raise HypothesisViolated("partial mode needs a split target cone")
    obliq = check_partial_obliqueness(P, cone)
    if obliq.mode != "partial":
        raise NotOblique(f"pair fails partial obliqueness (margin {obliq.margin:.4f})")
    alpha, beta = dens_P.degree, dens_S.degree
    if not beta > alpha:
        raise HypothesisViolated(
            f"target degree {beta} must exceed source degree {alpha}")
    if not check_vanishing_order(dens_P, P, 1.0 + alpha):
        order, _ = estimate_vanishing_order(dens_P, P)
        raise HypothesisViolated(
            f"source density vanishing order {order:.2f} exceeds 1 + alpha "
            f"= {1.0 + alpha:.2f}")
    mesh = LinkMesh(P, cfg.mesh)
    ctx = EnergyContext(mesh, cone, dens_P, dens_S, dual_res=cfg.dual_res,
                        roundness_R=None,
                        v_floor=cfg.v_floor_rel * P.diameter)
    k = cone.split_k
    v0 = 1.0 + np.linalg.norm(mesh.nodes[:, k:], axis=1)
    v, dual, rep, history, converged, iters, stalls, norm_state, grad, via = _run_descent(
        ctx, cfg, v0, obliq, None)
    omega = extract_free_boundary(v, cone, dual.grid, dual.w_corner)
    health = _health_partial(ctx, v, dual, cfg)
    a, b = health["omega_prime"]
    if norm_state is not None:
        norm_state.john_translation = np.array([0.5 * (a + b)])
    stat, stat_fine = _certificates(ctx, cfg, v, dual, grad)
    bundle = SolutionBundle(
        v=v,
        u=GridFunction(dual.grid, dual.u_corner),
        omega=omega,
        report=ctx.report(v),
        obliqueness=obliq,
        config=cfg,
        history=history,
        converged=converged,
        iterations=iters,
        stationarity=stat,
        stationarity_fine=stat_fine,
        sandwich=None,
        normalization=norm_state,
        health=health,
        omega_prime=(a, b),
        stall_events=stalls,
        converged_via=via,
    )
    if not converged and grad is not None:
        gnorm = ctx.grad_norm(grad)
        if gnorm > 10 * cfg.grad_tol:
            raise NoConvergence(
                f"gradient norm {gnorm:.3e} above 10x tolerance after "
                f"{iters} iterations", bundle=bundle)
    return bundle
