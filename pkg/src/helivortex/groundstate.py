"""Ground states of -div(K_H grad u) = eps^-2 (u - q ln(1/eps))_+^p, u = 0 on the boundary.

The discrete energy is

    I(u) = 1/2 u.A.u - 1/((p+1) eps^2) * sum_i m_i (u_i - q_i ln(1/eps))_+^(p+1)

with ``A`` the P1 stiffness matrix of L_H. The nonlinear term uses the
edge-midpoint rule on every triangle, applied to the P1 interpolants of u
and q. The gradient and Jacobian below are the exact derivatives of this
discrete functional, so the Nehari identity and the energy decomposition
hold to rounding at a discrete critical point.

Ground states are found by minimising I over the Nehari manifold
(steepest descent in the energy metric, re-projected after every step)
and then polished with Newton's method on I'(u) = 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import brentq

from .domain import Mesh, _points_in_polygon, distance_to_boundary
from .errors import (
    CenterOutsideDomain,
    CollapseToZero,
    MaxIterations,
    NotProjectable,
    SolveFailure,
)
from .helical_operator import SparseOperator, assemble, check_field, sqrt_det_k

log = logging.getLogger(__name__)

TRIVIAL_GUARD = 1e-14


@dataclass(frozen=True)
class SolverOptions:
    gradient_tol: float = 1e-5
    residual_tol: float = 1e-8
    max_gradient_iters: int = 4000
    max_newton_iters: int = 60
    armijo: float = 1e-4
    taus: tuple = (1.0, 2.0, 4.0)


@dataclass(frozen=True, eq=False)
class ProblemState:
    """One instance of the semilinear problem on a fixed mesh."""

    mesh: Mesh
    k: float
    p: float
    eps: float
    q: np.ndarray
    operator: SparseOperator = field(default=None, repr=False)

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError(f"exponent p must exceed 1, got {self.p}")
        if not 0 < self.eps < 1:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if not self.k > 0:
            raise ValueError(f"pitch k must be positive, got {self.k}")
        q = check_field(self.mesh, self.q, "q")
        if q.min() <= 0:
            raise ValueError("q must be positive")
        q = q.copy()
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        if self.operator is None:
            object.__setattr__(self, "operator", assemble(self.mesh, self.k))

    @classmethod
    def constant_q(cls, mesh, k, p, eps, m=1.0):
        return cls(mesh, k, p, eps, np.full(mesh.n_vertices, float(m)))

    def with_eps(self, eps):
        """Same mesh, pitch, exponent, q and stiffness matrix at a new eps."""
        return replace(self, eps=float(eps))

    @property
    def log_inv_eps(self):
        return math.log(1.0 / self.eps)

    @cached_property
    def free(self):
        return self.operator.free

    @cached_property
    def _quadrature(self):
        """Interpolation from nodes to edge midpoints and the midpoint weights."""
        mesh = self.mesh
        m = mesh.n_triangles
        tri = mesh.triangles
        pairs = ((0, 1), (1, 2), (2, 0))
        rows = np.repeat(np.arange(3 * m), 2)
        cols = np.stack([tri[:, [a, b]] for a, b in pairs], axis=1).reshape(-1)
        full = sp.csr_matrix((np.full(6 * m, 0.5), (rows, cols)), shape=(3 * m, mesh.n_vertices))
        weights = np.repeat(mesh.areas / 3.0, 3)
        return full, weights

    @cached_property
    def interp_full(self):
        """Sparse map from all nodal values to the 3 M edge-midpoint values."""
        return self._quadrature[0]

    @cached_property
    def interp(self):
        """Sparse map from free nodal values to the edge-midpoint values."""
        return self.interp_full[:, self.free].tocsr()

    @cached_property
    def interp_t(self):
        return self.interp.T.tocsr()

    @cached_property
    def weights(self):
        return self._quadrature[1]

    @cached_property
    def shift(self):
        """q ln(1/eps) at the quadrature points."""
        return (self.interp_full @ self.q) * self.log_inv_eps

    @cached_property
    def a_free(self):
        return self.operator.interior_matrix

    def integrate(self, values_q) -> float:
        """Quadrature of values given at the edge midpoints."""
        return float(self.weights @ values_q)

    def at_quadrature(self, u) -> np.ndarray:
        """Values of a nodal field at the edge midpoints."""
        return self.interp_full @ check_field(self.mesh, u, "u")

    def restrict(self, u):
        return check_field(self.mesh, u, "u")[self.free]

    def extend(self, x):
        u = np.zeros(self.mesh.n_vertices)
        u[self.free] = x
        return u

    # -- free-node kernels -------------------------------------------------
    def _plus(self, x):
        return np.maximum(self.interp @ x - self.shift, 0.0)

    def _active(self, x):
        """Indices and values of the positive part at the quadrature points."""
        s = self.interp @ x - self.shift
        idx = np.flatnonzero(s > 0)
        return idx, s[idx]

    def _energy(self, x):
        idx, s = self._active(x)
        nonlinear = self.weights[idx] @ s ** (self.p + 1)
        return 0.5 * x @ (self.a_free @ x) - nonlinear / ((self.p + 1) * self.eps**2)

    def _gradient(self, x):
        idx, s = self._active(x)
        load = np.zeros(len(self.weights))
        load[idx] = self.weights[idx] * s**self.p
        return self.a_free @ x - self.interp_t @ load / self.eps**2

    def _dual_norm(self, r):
        return math.sqrt(max(r @ self.operator.solve_interior(r), 0.0))

    def _jacobian(self, x):
        d = self.p * self.weights * self._plus(x) ** (self.p - 1) / self.eps**2
        return (self.a_free - self.interp_t @ sp.diags(d) @ self.interp).tocsc()


@dataclass(eq=False)
class Solution:
    """Converged critical point with bookkeeping."""

    state: ProblemState
    u: np.ndarray
    energy: float
    residual_norm: float
    nehari_defect: float
    newton_iters: int
    gradient_iters: int
    flags: list = field(default_factory=list)

    @property
    def eps(self):
        return self.state.eps

    @property
    def phi(self):
        """Stream function u - q ln(1/eps)."""
        return self.u - self.state.q * self.state.log_inv_eps

    @property
    def w(self):
        """Planar vorticity eps^-2 (phi)_+^p at the nodes."""
        return np.maximum(self.phi, 0.0) ** self.state.p / self.state.eps**2

    @property
    def norm_sq(self):
        return float(self.u @ (self.state.operator.matrix @ self.u))

    def metadata(self):
        s = self.state
        return {
            "k": s.k,
            "p": s.p,
            "eps": s.eps,
            "energy": self.energy,
            "residual_norm": self.residual_norm,
            "nehari_defect": self.nehari_defect,
            "newton_iters": self.newton_iters,
            "gradient_iters": self.gradient_iters,
            "flags": list(self.flags),
        }


def functional_value(state: ProblemState, u) -> float:
    """I_eps(u) for a Dirichlet-zero nodal field."""
    return float(state._energy(state.restrict(u)))


def functional_gradient(state: ProblemState, u) -> np.ndarray:
    """Residual vector r with r.v = <I'(u), v>; zero on boundary rows."""
    return state.extend(state._gradient(state.restrict(u)))


def dual_norm(state: ProblemState, r) -> float:
    """Norm of a residual vector in the dual of the energy norm."""
    return state._dual_norm(state.restrict(r))


def nehari_pairing(state: ProblemState, u) -> float:
    """<I'(u), u>."""
    x = state.restrict(u)
    return float(state._gradient(x) @ x)


def _project_free(state, x):
    """Nehari scaling for a free-node vector; returns (t, t x)."""
    xq = state.interp @ x
    pos = xq > 0
    if not np.any(pos):
        raise NotProjectable("u_+ vanishes identically")
    a = float(x @ (state.a_free @ x))
    if not a > 0:
        raise NotProjectable("u has zero energy norm")
    wx = state.weights * xq
    eps2 = state.eps**2
    p = state.p
    shift = state.shift

    def g(t):
        return t * a - (wx @ np.maximum(t * xq - shift, 0.0) ** p) / eps2

    # below t_lo the nonlinear term vanishes, so g > 0 there
    t_lo = float(np.min(shift[pos] / xq[pos]))
    t_hi = 2.0 * t_lo
    while g(t_hi) >= 0:
        t_lo, t_hi = t_hi, 2.0 * t_hi
        if t_hi > 1e300:
            raise NotProjectable("Nehari scaling diverged")
    # only points active somewhere in the bracket contribute
    act = t_hi * xq > shift
    xa, wa, sa = xq[act], wx[act], shift[act]

    def g_active(t):
        return t * a - (wa @ np.maximum(t * xa - sa, 0.0) ** p) / eps2

    t = brentq(g_active, t_lo, t_hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return t, t * x


def nehari_project(state: ProblemState, u):
    """Unique t > 0 with t u on the Nehari manifold; returns ``(t, t*u)``."""
    t, x = _project_free(state, state.restrict(u))
    return t, state.extend(x)


# -- initial guess -----------------------------------------------------------
def cap_profile(s):
    """Radial profile U: ln(1/s) for s >= 1 and 1 - 3/2 s^2 + 1/2 s^4 inside.

    The cap satisfies U(0) = 1, U(1) = 0 and U'(1) = -1, so U is C^1 and
    nonnegative on the unit ball.
    """
    s = np.asarray(s, dtype=float)
    inner = 1.0 - 1.5 * s**2 + 0.5 * s**4
    with np.errstate(divide="ignore"):
        outer = -np.log(np.maximum(s, 1e-300))
    return np.where(s < 1.0, inner, outer)


def _smooth_cutoff(r, delta):
    """1 on [0, delta], 0 beyond 2 delta, quintic smoothstep in between."""
    t = np.clip((np.asarray(r) - delta) / delta, 0.0, 1.0)
    return 1.0 - t**3 * (10.0 - 15.0 * t + 6.0 * t**2)


def aspect_axes(center, k):
    """Unit radial/tangential frame at ``center`` and the semi-axis scales (l1, l2).

    In the frame where the center lies on the positive x1-axis K_H is
    diagonal and l2/l1 = sqrt(K22/K11); the larger axis is normalised to 1.
    """
    c = np.asarray(center, dtype=float)
    r = float(np.hypot(*c))
    e_r = c / r if r > 0 else np.array([1.0, 0.0])
    e_t = np.array([-e_r[1], e_r[0]])
    l1 = k / math.sqrt(k * k + r * r)
    return e_r, e_t, l1, 1.0


def contains(mesh: Mesh, point) -> bool:
    loop = mesh.vertices[mesh.boundary_vertices]
    return bool(_points_in_polygon(np.atleast_2d(np.asarray(point, dtype=float)), loop)[0])


def initial_guess(state: ProblemState, center, tau: float = 1.0) -> np.ndarray:
    """Nodal interpolant of q (U_hat((x - center)/eps) + ln(tau/eps)) chi_delta."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    mesh = state.mesh
    center = np.asarray(center, dtype=float)
    if not contains(mesh, center):
        raise CenterOutsideDomain(f"center {center.tolist()} is not inside the domain")
    dist = distance_to_boundary(mesh, center)
    if dist <= 0:
        raise CenterOutsideDomain("center lies on the boundary")
    delta = min(dist / 2.0, 0.25)
    e_r, e_t, l1, l2 = aspect_axes(center, state.k)
    d = mesh.vertices - center
    z1 = d @ e_r / l1
    z2 = d @ e_t / l2
    rho = np.hypot(z1, z2)
    val = state.q * (cap_profile(rho / state.eps) + math.log(tau / state.eps)) * _smooth_cutoff(rho, delta)
    val[mesh.boundary_mask] = 0.0
    return val


def inward_center(mesh: Mesh, point, depth=None):
    """Move ``point`` inside the domain to distance ``depth`` from the boundary.

    The default depth is a quarter of the largest vertex distance to the
    boundary. Points already deep enough are returned unchanged.
    """
    point = np.asarray(point, dtype=float)
    if depth is None:
        depth = 0.25 * max_inradius(mesh)
    if contains(mesh, point) and distance_to_boundary(mesh, point) >= depth:
        return point
    a = mesh.vertices[mesh.boundary_edges[:, 0]]
    b = mesh.vertices[mesh.boundary_edges[:, 1]]
    mid = 0.5 * (a + b)
    e = int(np.argmin(np.linalg.norm(mid - point, axis=1)))
    inward = -mesh.normals[e]
    lo, hi = 0.0, 4.0 * depth
    for _ in range(60):
        m = 0.5 * (lo + hi)
        c = point + m * inward
        if contains(mesh, c) and distance_to_boundary(mesh, c) >= depth:
            hi = m
        else:
            lo = m
    return point + hi * inward


def max_inradius(mesh: Mesh) -> float:
    pts = mesh.vertices[mesh.interior]
    stride = max(1, len(pts) // 4000)
    sample = pts[::stride]
    a = mesh.vertices[mesh.boundary_edges[:, 0]]
    b = mesh.vertices[mesh.boundary_edges[:, 1]]
    from .domain import _segment_distance

    best = 0.0
    for i in range(0, len(sample), 500):
        best = max(best, float(_segment_distance(sample[i : i + 500], a, b).min(axis=1).max()))
    return best


def default_center(state: ProblemState):
    """Argmin of q^2 sqrt(det K_H) over the vertices, pulled inside the domain."""
    f = state.q**2 * sqrt_det_k(state.mesh.vertices, state.k)
    fmin = f.min()
    cand = np.flatnonzero(f <= fmin * (1 + 1e-12))
    ang = np.mod(np.arctan2(state.mesh.vertices[cand, 1], state.mesh.vertices[cand, 0]), 2 * np.pi)
    x = state.mesh.vertices[cand[np.argmin(ang)]]
    return inward_center(state.mesh, x)


# -- solvers -----------------------------------------------------------------
def _nonlinear_mass(state, x):
    return float(state.weights @ state._plus(x) ** (state.p + 1))


def nehari_descent(state: ProblemState, x, options: SolverOptions):
    """Descent of I on the Nehari manifold in the energy metric.

    Search directions are Polak-Ribiere (PR+) combinations of successive
    Sobolev gradients, which speeds up the slow drift of the core; the
    direction is reset to steepest descent whenever it fails to descend.
    """
    _, x = _project_free(state, x)
    energy = state._energy(x)
    step = 1.0
    it = 0
    gnorm = np.inf
    r_old = g_old = d = None
    while it < options.max_gradient_iters:
        r = state._gradient(x)
        g = state.operator.solve_interior(r)
        gnorm = math.sqrt(max(r @ g, 0.0))
        if gnorm < options.gradient_tol:
            break
        if d is None:
            d = -g
        else:
            beta = max(0.0, r @ (g - g_old) / (r_old @ g_old))
            d = -g + beta * d
            if r @ d >= -1e-3 * gnorm * math.sqrt(max(d @ (state.a_free @ d), 0.0)):
                d = -g
        slope = r @ d
        s = step
        while True:
            try:
                _, trial = _project_free(state, x + s * d)
                e_trial = state._energy(trial)
            except NotProjectable:
                e_trial = np.inf
            if e_trial <= energy + options.armijo * s * slope:
                break
            s *= 0.5
            if s < 1e-12:
                if np.array_equal(d, -g):
                    log.debug("descent stalled at |g|=%.3e", gnorm)
                    return x, it, gnorm
                d = -g
                slope = r @ d
                s = step
        x, energy = trial, e_trial
        r_old, g_old = r, g
        step = min(2.0 * s, 16.0)
        it += 1
        if it % 200 == 0:
            log.debug("descent it=%d I=%.12g |g|=%.3e step=%.3g", it, energy, gnorm, s)
    return x, it, gnorm


def newton(state: ProblemState, x, options: SolverOptions):
    """Damped Newton iteration on I'(u) = 0 measured in the dual energy norm."""
    r = state._gradient(x)
    res = state._dual_norm(r)
    it = 0
    while res > options.residual_tol:
        if it >= options.max_newton_iters:
            raise MaxIterations(f"Newton did not converge, residual {res:.3e}")
        jac = state._jacobian(x)
        try:
            dx = spla.splu(jac).solve(-r)
        except RuntimeError:
            dx = -state.operator.solve_interior(r)
        alpha = 1.0
        while True:
            trial = x + alpha * dx
            if _nonlinear_mass(state, trial) >= TRIVIAL_GUARD:
                r_trial = state._gradient(trial)
                res_trial = state._dual_norm(r_trial)
                if res_trial < (1.0 - 1e-4 * alpha) * res:
                    break
            alpha *= 0.5
            if alpha < 1e-10:
                raise MaxIterations(f"Newton line search failed at residual {res:.3e}")
        x, r, res = trial, r_trial, res_trial
        it += 1
        log.debug("newton it=%d res=%.3e alpha=%.3g", it, res, alpha)
    return x, it, res


def _finish(state, x, n_newton, n_grad, res):
    return Solution(
        state=state,
        u=state.extend(x),
        energy=float(state._energy(x)),
        residual_norm=float(res),
        nehari_defect=float(state._gradient(x) @ x),
        newton_iters=n_newton,
        gradient_iters=n_grad,
    )


def evaluate_solution(state: ProblemState, u, newton_iters=0, gradient_iters=0) -> Solution:
    """Wrap a stored nodal field as a Solution, recomputing energy and residuals."""
    x = state.restrict(u)
    return _finish(state, x, newton_iters, gradient_iters, state._dual_norm(state._gradient(x)))


def solve_ground_state(
    state: ProblemState,
    guess=None,
    *,
    center=None,
    tau: float | None = None,
    options: SolverOptions | None = None,
) -> Solution:
    """Nehari descent followed by Newton polishing.

    Without ``guess`` the test-function initializer is used at ``center``
    (default: the minimiser of q^2 sqrt(det K_H), pulled off the boundary)
    with ``tau`` in ``options.taus`` tried in order until the iteration
    does not collapse to u = 0.
    """
    options = options or SolverOptions()
    if guess is not None:
        attempts = [np.asarray(guess, dtype=float)]
    else:
        if center is None:
            center = default_center(state)
        taus = (tau,) if tau is not None else options.taus
        attempts = [initial_guess(state, center, t) for t in taus]
    last = None
    for u0 in attempts:
        try:
            x, n_grad, _ = nehari_descent(state, state.restrict(u0), options)
            x, n_newton, res = newton(state, x, options)
        except (NotProjectable, MaxIterations) as exc:
            last = exc
            continue
        if _nonlinear_mass(state, x) < TRIVIAL_GUARD:
            last = CollapseToZero("iteration converged to the trivial solution")
            continue
        return _finish(state, x, n_newton, n_grad, res)
    if isinstance(last, CollapseToZero) or last is None:
        raise CollapseToZero(f"no nontrivial solution after {len(attempts)} attempts")
    raise last


def core_diameter_estimate(sol: Solution) -> float:
    """Largest distance between nodes where u exceeds q ln(1/eps)."""
    pts = sol.state.mesh.vertices[sol.phi > 0]
    if len(pts) < 2:
        return 0.0
    from scipy.spatial import ConvexHull, QhullError

    try:
        pts = pts[ConvexHull(pts).vertices]
    except QhullError:
        pass
    d = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((d**2).sum(-1)).max())


def continue_in_epsilon(state_template: ProblemState, eps_list, *, options=None, guess=None, center=None):
    """Solve along a strictly decreasing eps sequence, warm-starting each step."""
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        return []
    if any(not 0 < e < 1 for e in eps_list) or any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing in (0, 1)")
    options = options or SolverOptions()
    out = []
    prev = guess
    for eps in eps_list:
        state = state_template.with_eps(eps)
        try:
            if prev is None:
                sol = solve_ground_state(state, center=center, options=options)
            else:
                sol = solve_ground_state(state, prev, options=options)
        except Exception as exc:
            raise SolveFailure(f"solve failed at eps={eps}: {exc}", eps=eps) from exc
        diam = core_diameter_estimate(sol)
        if diam < 8 * state.mesh.h:
            sol.flags.append("UnderResolved")
        log.info(
            "eps=%g energy=%.10g res=%.2e grad_it=%d newton_it=%d diam/h=%.1f",
            eps, sol.energy, sol.residual_norm, sol.gradient_iters, sol.newton_iters, diam / state.mesh.h,
        )
        out.append(sol)
        prev = sol.u
    return out
