"""Three-dimensional helical fields from a planar solution.

Sign conventions: grad_perp(phi) = (d2 phi, -d1 phi), zeta(x) = (x2, -x1, k)
and the screw motion H_rho(x) = R_rho x + k rho e3 with the clockwise
rotation R_rho = [[cos, sin, 0], [-sin, cos, 0], [0, 0, 1]]; zeta is the
generator of rho -> H_rho(x).

All pointwise quantities live at triangle barycenters, where gradients of
P1 fields are constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .asymptotics import vortex_core
from .domain import Mesh
from .groundstate import Solution
from .helical_operator import _MIDPOINTS, boundary_flux, perp, quadrature_points

DEFAULT_RHO = 64


@dataclass(frozen=True)
class HelicalSample:
    point: np.ndarray
    velocity: np.ndarray
    vorticity: np.ndarray


@dataclass(frozen=True, eq=False)
class HelicalLift:
    """Lifted samples stored as arrays of shape (n_rho, n_tri, ...)."""

    k: float
    rho: np.ndarray
    triangles: np.ndarray
    points: np.ndarray
    velocity: np.ndarray
    vorticity: np.ndarray
    w: np.ndarray

    def __len__(self):
        return self.points.shape[0] * self.points.shape[1]

    def samples(self):
        for i in range(self.points.shape[0]):
            for j in range(self.points.shape[1]):
                yield HelicalSample(self.points[i, j], self.velocity[i, j], self.vorticity[i, j])

    def zeta(self):
        return zeta(self.points, self.k)


@dataclass(frozen=True)
class SteadyReport:
    transport: float
    divergence: float
    boundary: float

    def to_dict(self):
        return {"transport": self.transport, "divergence": self.divergence, "boundary": self.boundary}


def zeta(points, k):
    """Helical direction (x2, -x1, k) at 2D or 3D points."""
    p = np.asarray(points, dtype=float)
    out = np.empty(p.shape[:-1] + (3,))
    out[..., 0] = p[..., 1]
    out[..., 1] = -p[..., 0]
    out[..., 2] = k
    return out


def velocity_matrix(x, k):
    """-(1/(k^2+|x|^2)) [[x1 x2, -k^2-x1^2], [k^2+x2^2, -x1 x2]], mapping grad phi to (v1, v2)."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    k2 = k * k
    d = -1.0 / (k2 + x1 * x1 + x2 * x2)
    out = np.empty(x.shape[:-1] + (2, 2))
    out[..., 0, 0] = d * x1 * x2
    out[..., 0, 1] = -d * (k2 + x1 * x1)
    out[..., 1, 0] = d * (k2 + x2 * x2)
    out[..., 1, 1] = -d * x1 * x2
    return out


def planar_velocity_from(mesh: Mesh, phi, k):
    """(v1, v2) at barycenters for the stream function ``phi``."""
    g = mesh.field_gradient(phi)
    return np.einsum("tab,tb->ta", velocity_matrix(mesh.barycenters, k), g)


def planar_velocity(sol: Solution) -> np.ndarray:
    """(v1, v2) at every triangle barycenter, shape (M, 2)."""
    return planar_velocity_from(sol.state.mesh, sol.phi, sol.state.k)


def third_velocity(v12, points, k) -> np.ndarray:
    """v3 = (x1 v2 - x2 v1)/k, closing v . zeta = 0."""
    v12 = np.asarray(v12, dtype=float)
    x = np.asarray(points, dtype=float)
    return (x[..., 0] * v12[..., 1] - x[..., 1] * v12[..., 0]) / k


def rotation3(rho):
    c, s = math.cos(rho), math.sin(rho)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def default_rho(n=DEFAULT_RHO):
    return 2 * np.pi * np.arange(n) / n


def helical_lift(sol: Solution, rho_samples=None, triangles=None) -> HelicalLift:
    """Lift barycentric velocity and vorticity along the screw motion.

    ``triangles`` restricts the cross-section samples (default: all). The
    rotation uses rho reduced mod 2 pi, so samples one pitch apart differ
    only in x3, by exactly 2 pi k up to the rounding of k rho.
    """
    mesh = sol.state.mesh
    k = sol.state.k
    rho = default_rho() if rho_samples is None else np.asarray(rho_samples, dtype=float)
    if not np.all(np.isfinite(rho)):
        raise ValueError("rho samples must be finite")
    tri = np.arange(mesh.n_triangles) if triangles is None else np.asarray(triangles, dtype=int)
    x = mesh.barycenters[tri]
    v12 = planar_velocity(sol)[tri]
    v = np.column_stack([v12, third_velocity(v12, x, k)])
    w = sol.w[mesh.triangles[tri]].mean(axis=1)
    base = np.column_stack([x, np.zeros(len(x))])
    pts = np.empty((len(rho), len(tri), 3))
    vel = np.empty_like(pts)
    for i, r in enumerate(rho):
        rot = rotation3(math.fmod(r, 2 * math.pi))
        pts[i] = base @ rot.T
        pts[i, :, 2] = k * r
        vel[i] = v @ rot.T
    vort = (w / k)[None, :, None] * zeta(pts, k)
    return HelicalLift(k, rho, tri, pts, vel, vort, np.broadcast_to(w, (len(rho), len(tri))))


def tube_components(sol: Solution, n_rho: int = DEFAULT_RHO) -> int:
    """Connected components of the vorticity support over one closed pitch.

    Nodes are (core triangle, rho index); neighbours are core triangles
    sharing a positive vertex at the same rho and the same triangle at
    cyclically consecutive rho.
    """
    mesh = sol.state.mesh
    core = vortex_core(sol)
    nc = len(core)
    if nc == 0:
        return 0
    tri = mesh.triangles[core]
    mask = sol.phi[tri] > 0
    t_idx = np.repeat(np.arange(nc), 3)[mask.ravel()]
    v_idx = tri.ravel()[mask.ravel()]
    _, v_loc = np.unique(v_idx, return_inverse=True)
    nv = v_loc.max() + 1
    per = nc + nv
    rows, cols = [], []
    for j in range(n_rho):
        off = j * per
        rows.append(off + t_idx)
        cols.append(off + nc + v_loc)
        nxt = ((j + 1) % n_rho) * per
        rows.append(off + np.arange(nc))
        cols.append(nxt + np.arange(nc))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    n = n_rho * per
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    tri_nodes = (np.arange(n_rho)[:, None] * per + np.arange(nc)[None, :]).ravel()
    return int(len(np.unique(labels[tri_nodes])))


def derived_normal_velocity(mesh: Mesh, q) -> np.ndarray:
    """v_n = -grad_perp(q) . nu on each boundary edge."""
    return -boundary_flux(mesh, q)


def _transport_defect(mesh, phi, w):
    gw = mesh.field_gradient(w)
    gp = mesh.field_gradient(phi)
    a = mesh.areas
    num = math.sqrt(float(a @ np.einsum("ta,ta->t", gw, perp(gp)) ** 2))
    den = math.sqrt(float(a @ (np.einsum("ta,ta->t", gw, gw) * np.einsum("ta,ta->t", gp, gp))))
    return num / den if den > 0 else 0.0


def _divergence_defect(sol: Solution):
    """Weak divergence of the weighted barycentric velocity in the dual energy norm.

    The flux F = ((k^2 + x2^2) v1 - x1 x2 v2, -x1 x2 v1 + (k^2 + x1^2) v2)/k^2
    is divergence free in the continuum. Here v is frozen at barycenters
    while the weights are evaluated at the edge midpoints, so the defect
    measures the consistency of the pointwise velocity at O(h).
    """
    st = sol.state
    mesh = st.mesh
    k2 = st.k**2
    v = planar_velocity(sol)
    xq = quadrature_points(mesh)  # (M, 3, 2)
    x1, x2 = xq[..., 0], xq[..., 1]
    v1, v2 = v[:, None, 0], v[:, None, 1]
    flux = np.stack([(k2 + x2**2) * v1 - x1 * x2 * v2, -x1 * x2 * v1 + (k2 + x1**2) * v2], axis=-1) / k2
    fbar = flux.mean(axis=1)  # midpoint rule, constant test gradients
    local = np.einsum("tjd,td->tj", mesh.gradients, fbar) * mesh.areas[:, None]
    r = np.bincount(mesh.triangles.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)
    rf = r[st.free]
    dual = math.sqrt(max(float(rf @ st.operator.solve_interior(rf)), 0.0))
    gp = mesh.field_gradient(sol.phi)
    scale = math.sqrt(float(mesh.areas @ np.einsum("ta,ta->t", gp, gp)))
    return dual / scale if scale > 0 else 0.0


def verify_steady(sol: Solution) -> SteadyReport:
    """Transport, divergence and boundary-flux defects of the lifted flow.

    The boundary target is v_n ln(1/eps) with v_n derived from q (zero for
    constant q); its defect is the max edge mismatch over max |grad phi|.
    """
    st = sol.state
    mesh = st.mesh
    phi = sol.phi
    transport = _transport_defect(mesh, phi, sol.w)
    divergence = _divergence_defect(sol)
    flux = boundary_flux(mesh, phi)
    target = derived_normal_velocity(mesh, st.q) * st.log_inv_eps
    gmax = float(np.sqrt((mesh.field_gradient(phi) ** 2).sum(axis=1)).max())
    boundary = float(np.abs(flux - target).max()) / gmax if gmax > 0 else 0.0
    return SteadyReport(transport, divergence, boundary)


def write_vtk(path, lift: HelicalLift, comment: str = "helical lift"):
    """Legacy ASCII VTK unstructured grid of lifted points with VERTEX cells."""
    pts = lift.points.reshape(-1, 3)
    vel = lift.velocity.reshape(-1, 3)
    vort = lift.vorticity.reshape(-1, 3)
    w = np.asarray(lift.w).reshape(-1)
    n = len(pts)
    title = comment.replace("\n", " ")[:255]
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {n} double\n")
        np.savetxt(fh, pts, fmt="%.12g")
        fh.write(f"CELLS {n} {2 * n}\n")
        np.savetxt(fh, np.column_stack([np.ones(n, dtype=int), np.arange(n)]), fmt="%d")
        fh.write(f"CELL_TYPES {n}\n")
        np.savetxt(fh, np.ones(n, dtype=int), fmt="%d")
        fh.write(f"POINT_DATA {n}\n")
        fh.write("VECTORS velocity double\n")
        np.savetxt(fh, vel, fmt="%.12g")
        fh.write("VECTORS vorticity double\n")
        np.savetxt(fh, vort, fmt="%.12g")
        fh.write("SCALARS w double 1\nLOOKUP_TABLE default\n")
        np.savetxt(fh, w, fmt="%.12g")


def read_vtk_points(path):
    """Point count and coordinates of a file written by ``write_vtk``."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    i = next(j for j, ln in enumerate(lines) if ln.startswith("POINTS"))
    n = int(lines[i].split()[1])
    pts = np.array([[float(v) for v in ln.split()] for ln in lines[i + 1 : i + 1 + n]]).reshape(n, 3)
    return pts
