"""Coefficient matrix K_H and P1 discretisation of L_H = -div(K_H grad).

All bilinear forms use the edge-midpoint rule on each triangle, which is
exact for quadratics.  Nodal fields are plain ``numpy`` arrays with one
value per mesh vertex.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain import Mesh
from .errors import (
    MeshMismatch,
    NonpositivePitch,
    NonpositiveResult,
    NonpositiveTrace,
    NonpositiveWeight,
    SolverBreakdown,
)

log = logging.getLogger(__name__)

DIRECT_LIMIT = 200_000

# barycentric coordinates of the edge midpoints
_MIDPOINTS = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])


def k_matrix(x, k):
    """K_H at a point ``x`` (or an array of points, shape (..., 2)) for pitch ``k``.

    >>> k_matrix((1.0, 0.0), 1.0)
    array([[0.5, 0. ],
           [0. , 1. ]])
    """
    if not k > 0:
        raise NonpositivePitch(f"pitch k must be positive, got {k}")
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    k2 = k * k
    d = k2 + x1 * x1 + x2 * x2
    out = np.empty(x.shape[:-1] + (2, 2))
    out[..., 0, 0] = (k2 + x2 * x2) / d
    out[..., 1, 1] = (k2 + x1 * x1) / d
    out[..., 0, 1] = out[..., 1, 0] = 0.0 - x1 * x2 / d
    return out


def sqrt_det_k(x, k):
    """sqrt(det K_H) = k / sqrt(k^2 + |x|^2)."""
    x = np.asarray(x, dtype=float)
    return k / np.sqrt(k * k + x[..., 0] ** 2 + x[..., 1] ** 2)


def perp(g):
    """Clockwise quarter turn: (a, b) -> (b, -a)."""
    g = np.asarray(g, dtype=float)
    return np.stack([g[..., 1], -g[..., 0]], axis=-1)


def quadrature_points(mesh: Mesh):
    """Edge midpoints of every triangle, shape (M, 3, 2)."""
    return np.einsum("qj,tjd->tqd", _MIDPOINTS, mesh.vertices[mesh.triangles])


def check_field(mesh: Mesh, values, name="field"):
    v = np.asarray(values, dtype=float)
    if v.shape != (mesh.n_vertices,):
        raise MeshMismatch(f"{name} has {v.shape} values, mesh has {mesh.n_vertices} vertices")
    return v


def _element_coefficients(mesh, k, weight):
    kq = k_matrix(quadrature_points(mesh), k)  # (M, 3, 2, 2)
    if weight is not None:
        w = check_field(mesh, weight, "weight")
        wq = np.einsum("qj,tj->tq", _MIDPOINTS, w[mesh.triangles])
        if np.any(wq <= 0):
            raise NonpositiveWeight("weight must be positive at every quadrature point")
        kq = kq * wq[..., None, None]
    return kq.mean(axis=1)


@dataclass(frozen=True, eq=False)
class SparseOperator:
    """Assembled symmetric form a(u, v) = int w (K_H grad u | grad v).

    ``matrix`` is the unconstrained stiffness matrix; ``dirichlet`` marks the
    rows that are constrained when solving.
    """

    mesh: Mesh
    k: float
    matrix: sp.csr_matrix
    dirichlet: np.ndarray

    @property
    def dimension(self):
        return self.matrix.shape[0]

    @cached_property
    def free(self):
        return np.flatnonzero(~self.dirichlet)

    @cached_property
    def interior_matrix(self):
        f = self.free
        return self.matrix[f][:, f].tocsc()

    @cached_property
    def factor(self):
        """SuperLU factorisation of the constrained block (no pivoting, symmetric ordering)."""
        a = self.interior_matrix
        if np.any(a.diagonal() <= 0):
            raise SolverBreakdown("operator has a nonpositive diagonal entry")
        try:
            lu = spla.splu(
                a,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise SolverBreakdown(f"factorisation failed: {exc}") from exc
        pivots = lu.U.diagonal()
        if np.any(pivots <= 0):
            raise SolverBreakdown(
                "operator is not positive definite on the constrained subspace",
                trace=[float(pivots.min())],
            )
        return lu

    def apply(self, u):
        return self.matrix @ u

    def solve_interior(self, rhs):
        """Solve the constrained system for free-node values only."""
        if self.dimension < DIRECT_LIMIT:
            return self.factor.solve(np.asarray(rhs, dtype=float))
        return pcg(self.interior_matrix, rhs)


def assemble(mesh: Mesh, k: float, weight=None, dirichlet: bool = True) -> SparseOperator:
    """Assemble the P1 stiffness matrix of ``-div(w K_H grad)`` on ``mesh``."""
    kbar = _element_coefficients(mesh, k, weight)
    g = mesh.gradients  # (M, 3, 2)
    local = np.einsum("tia,tab,tjb->tij", g, kbar, g) * mesh.signed_areas[:, None, None]
    local = 0.5 * (local + local.transpose(0, 2, 1))
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_vertices
    a = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    a.sum_duplicates()
    mask = mesh.boundary_mask.copy() if dirichlet else np.zeros(n, dtype=bool)
    mask.setflags(write=False)
    return SparseOperator(mesh, float(k), a, mask)


def mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix."""
    local = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    vals = mesh.signed_areas[:, None, None] * local[None]
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def load_vector(mesh: Mesh, f) -> np.ndarray:
    """Load vector int f phi_i for a nodal field or a scalar ``f``."""
    if np.isscalar(f):
        f = np.full(mesh.n_vertices, float(f))
    return mass_matrix(mesh) @ check_field(mesh, f)


def pcg(a, b, tol=1e-12, maxiter=None):
    """Jacobi-preconditioned conjugate gradients; raises SolverBreakdown on loss of definiteness."""
    b = np.asarray(b, dtype=float)
    n = len(b)
    maxiter = maxiter or 10 * n
    dinv = 1.0 / a.diagonal()
    x = np.zeros(n)
    r = b.copy()
    z = dinv * r
    p = z.copy()
    rz = r @ z
    trace = [float(np.linalg.norm(r))]
    for _ in range(maxiter):
        if trace[-1] <= tol:
            return x
        ap = a @ p
        curv = p @ ap
        if curv <= 0:
            raise SolverBreakdown("nonpositive curvature in CG", trace=trace)
        alpha = rz / curv
        x += alpha * p
        r -= alpha * ap
        trace.append(float(np.linalg.norm(r)))
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverBreakdown("CG did not converge", trace=trace)


def solve_linear(op: SparseOperator, rhs, boundary_values=None) -> np.ndarray:
    """Solve ``A x = rhs`` on free nodes with ``x = boundary_values`` (default 0) on Dirichlet nodes."""
    mesh = op.mesh
    b = check_field(mesh, rhs, "rhs")
    x = np.zeros(mesh.n_vertices)
    fixed = op.dirichlet
    if boundary_values is not None:
        x[fixed] = check_field(mesh, boundary_values, "boundary_values")[fixed]
    free = op.free
    r = b[free] - (op.matrix[free][:, fixed] @ x[fixed] if fixed.any() else 0.0)
    x[free] = op.solve_interior(r)
    res = np.linalg.norm(op.interior_matrix @ x[free] - r)
    scale = max(np.linalg.norm(r), 1e-300)
    if np.linalg.norm(r) > 0 and res / scale > 1e-10:
        raise SolverBreakdown(f"relative residual {res / scale:.3e} exceeds 1e-10", trace=[res / scale])
    return x


def boundary_angle(mesh: Mesh, center=None):
    """Polar angle of every vertex about ``center`` (default: area centroid)."""
    if center is None:
        center = (mesh.barycenters * mesh.signed_areas[:, None]).sum(axis=0) / mesh.area
    d = mesh.vertices - np.asarray(center, dtype=float)
    return np.arctan2(d[:, 1], d[:, 0])


def solve_harmonic_q(mesh: Mesh, trace, k: float) -> np.ndarray:
    """Discrete L_H-harmonic extension of a positive boundary trace.

    ``trace`` is either a nodal array (only boundary entries are read) or a
    callable ``f(x, y)`` evaluated at the boundary vertices.
    """
    if callable(trace):
        vals = np.zeros(mesh.n_vertices)
        b = mesh.boundary_mask
        vals[b] = trace(mesh.vertices[b, 0], mesh.vertices[b, 1])
    else:
        vals = check_field(mesh, trace, "trace")
    if np.any(vals[mesh.boundary_mask] <= 0):
        raise NonpositiveTrace("boundary trace must be strictly positive")
    op = assemble(mesh, k)
    q = solve_linear(op, np.zeros(mesh.n_vertices), boundary_values=vals)
    if np.any(q <= 0):
        raise NonpositiveResult(f"harmonic extension has min {q.min():.3e} <= 0")
    return q


def energy_inner(mesh: Mesh, k: float, weight, u, v) -> float:
    """a(u, v) with optional nodal weight."""
    u = check_field(mesh, u, "u")
    v = check_field(mesh, v, "v")
    kbar = _element_coefficients(mesh, k, weight)
    gu = mesh.field_gradient(u)
    gv = mesh.field_gradient(v)
    return float(np.einsum("t,ta,tab,tb->", mesh.signed_areas, gu, kbar, gv))


def dirichlet_energy(mesh: Mesh, u) -> float:
    """int |grad u|^2 for a nodal field."""
    g = mesh.field_gradient(check_field(mesh, u, "u"))
    return float(np.einsum("t,ta,ta->", mesh.signed_areas, g, g))


def boundary_flux(mesh: Mesh, phi) -> np.ndarray:
    """perp(grad phi) . nu on every boundary edge, from the adjacent triangle."""
    g = mesh.field_gradient(check_field(mesh, phi, "phi"))[mesh.boundary_triangle]
    return np.einsum("ed,ed->e", perp(g), mesh.normals)


def write_field(path, values, comment: str | None = None):
    values = np.asarray(values, dtype=float)
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(f"field {len(values)}\n")
        fh.writelines(f"{v:.17g}\n" for v in values)


def read_field(path) -> np.ndarray:
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    head = lines[0].split()
    if head[0] != "field":
        raise ValueError(f"{path}: bad field header {lines[0]!r}")
    n = int(head[1])
    vals = np.array([float(v) for v in lines[1 : n + 1]])
    if len(vals) != n:
        raise ValueError(f"{path}: expected {n} values, found {len(vals)}")
    return vals
