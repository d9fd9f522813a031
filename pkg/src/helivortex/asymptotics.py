"""Vortex-core diagnostics and the predicted small-eps limits.

The core of a solution is the set of triangles whose barycentric value of
phi = u - q ln(1/eps) is positive. Geometry, circulation and energy of the
core are compared against the limits determined by the minimiser x* of
q^2 sqrt(det K_H) over the closed domain.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, QhullError

from .domain import Mesh, distance_to_boundary
from .errors import EmptyCore, InsufficientData
from .groundstate import Solution
from .helical_operator import check_field, k_matrix, sqrt_det_k

CSV_COLUMNS = (
    "eps",
    "c_over_log",
    "kappa",
    "diam",
    "diam_over_eps",
    "logdiam_over_logeps",
    "centroid_x",
    "centroid_y",
    "dist_to_xstar",
    "components",
    "core_energy",
)


@dataclass(frozen=True)
class CoreGeometry:
    diam: float
    dist_boundary: float
    centroid: np.ndarray
    components: int


@dataclass(frozen=True)
class CoreReport:
    eps: float
    core: np.ndarray
    diam: float
    dist_boundary: float
    centroid: np.ndarray
    components: int
    circulation: float
    core_energy: float
    energy_ratio: float
    diam_log_ratio: float
    diam_over_eps: float
    logdiam_over_logeps: float
    flags: tuple = ()


@dataclass(frozen=True)
class PredictedLimits:
    x_star: np.ndarray
    energy_limit: float
    circulation_limit: float
    interior: bool
    multiplicity: int = 1

    def to_dict(self):
        return {
            "x_star": [float(v) for v in self.x_star],
            "energy_limit": self.energy_limit,
            "circulation_limit": self.circulation_limit,
            "interior": self.interior,
            "multiplicity": self.multiplicity,
        }


@dataclass(frozen=True)
class Trend:
    status: str  # pass | stagnant | fail | not-applicable
    values: tuple
    target: float | None
    deviations: tuple = ()

    def to_dict(self):
        return {
            "status": self.status,
            "values": [float(v) for v in self.values],
            "target": self.target,
            "deviations": [float(v) for v in self.deviations],
        }


@dataclass
class ConvergenceTable:
    rows: list
    trends: dict
    limits: PredictedLimits
    extra: dict = field(default_factory=dict)


# -- core --------------------------------------------------------------------
def vortex_core(sol: Solution) -> np.ndarray:
    """Indices of triangles where phi is positive at the barycenter."""
    mesh = sol.state.mesh
    return np.flatnonzero(sol.phi[mesh.triangles].mean(axis=1) > 0)


def _diameter(points):
    if len(points) < 2:
        return 0.0
    if len(points) > 3:
        try:
            points = points[ConvexHull(points).vertices]
        except QhullError:
            pass
    d = points[:, None, :] - points[None, :, :]
    return float(np.sqrt((d**2).sum(-1)).max())


def core_components(core, mesh: Mesh, phi=None) -> int:
    """Number of connected components of a triangle set.

    Without ``phi`` triangles are adjacent when they share an edge. With
    ``phi`` they are adjacent when they share a vertex where phi > 0, which
    reproduces the connectivity of the P1 superlevel set {phi > 0}: the
    positive part of a triangle is convex and contains its positive
    vertices, and an edge with no positive endpoint carries no positive
    values.
    """
    core = np.asarray(core, dtype=int)
    if core.size == 0:
        return 0
    nc = len(core)
    if phi is None:
        pos = -np.ones(mesh.n_triangles, dtype=int)
        pos[core] = np.arange(nc)
        src = np.repeat(np.arange(nc), 3)
        dst = mesh.triangle_neighbors[core].ravel()
        keep = dst >= 0
        src, dst = src[keep], pos[dst[keep]]
        keep = dst >= 0
        graph = coo_matrix((np.ones(keep.sum()), (src[keep], dst[keep])), shape=(nc, nc))
    else:
        # bipartite graph: core triangles -- their positive vertices
        tri = mesh.triangles[core]
        mask = np.asarray(phi)[tri] > 0
        src = np.repeat(np.arange(nc), 3)[mask.ravel()]
        dst = nc + tri.ravel()[mask.ravel()]
        n = nc + mesh.n_vertices
        graph = coo_matrix((np.ones(len(src)), (src, dst)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return int(len(np.unique(labels[:nc])))


def core_metrics(core, mesh: Mesh, phi=None) -> CoreGeometry:
    """Diameter, boundary distance, area centroid and component count of a core.

    ``phi``, when given, selects superlevel-set connectivity for the
    component count (see ``core_components``).
    """
    core = np.asarray(core, dtype=int)
    if core.size == 0:
        raise EmptyCore("vortex core is empty")
    verts = np.unique(mesh.triangles[core])
    pts = mesh.vertices[verts]
    areas = mesh.areas[core]
    centroid = (mesh.barycenters[core] * areas[:, None]).sum(axis=0) / areas.sum()
    return CoreGeometry(
        diam=_diameter(pts),
        dist_boundary=distance_to_boundary(mesh, pts),
        centroid=centroid,
        components=core_components(core, mesh, phi),
    )


def circulation(sol: Solution) -> float:
    """kappa = eps^-2 int (phi)_+^p, with the quadrature of the nonlinear term."""
    s = sol.state
    return s.integrate(np.maximum(s.at_quadrature(sol.phi), 0.0) ** s.p) / s.eps**2


def _clip_positive(tri_pts, vals):
    """Polygon {P1 > 0} inside one triangle, as a vertex list."""
    out = []
    for i in range(3):
        j = (i + 1) % 3
        a, b = vals[i], vals[j]
        if a > 0:
            out.append(tri_pts[i])
        if (a > 0) != (b > 0):
            t = a / (a - b)
            out.append(tri_pts[i] + t * (tri_pts[j] - tri_pts[i]))
    return out


def core_energy(sol: Solution) -> float:
    """E_c = int over {phi > 0} of (K_H grad phi | grad phi).

    The positive part of each P1 triangle is clipped exactly and K_H is
    integrated over the clipped polygon with the edge-midpoint rule on a
    fan triangulation.
    """
    mesh = sol.state.mesh
    k = sol.state.k
    phi = sol.phi
    vals = phi[mesh.triangles]
    touched = np.flatnonzero((vals > 0).any(axis=1))
    if touched.size == 0:
        return 0.0
    grads = mesh.field_gradient(phi)
    total = 0.0
    for t in touched:
        poly = _clip_positive(mesh.vertices[mesh.triangles[t]], vals[t])
        g = grads[t]
        for i in range(1, len(poly) - 1):
            a, b, c = poly[0], poly[i], poly[i + 1]
            area = 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
            mids = np.array([(a + b) / 2, (b + c) / 2, (c + a) / 2])
            kbar = k_matrix(mids, k).mean(axis=0)
            total += area * float(g @ kbar @ g)
    return total


def core_energy_weak(sol: Solution) -> float:
    """a(phi, I_h phi_+): the core energy tested against the interpolated positive part.

    For constant q this equals eps^-2 int phi_+^p I_h(phi_+) by the discrete
    equation, so it differs from ``core_potential_energy`` only by quadrature.
    ``core_energy`` is the direct integral and carries the O(h) error of the
    cells cut by the free boundary.
    """
    st = sol.state
    v = np.maximum(sol.phi, 0.0)
    v[st.mesh.boundary_mask] = 0.0
    return float(sol.phi @ (st.operator.matrix @ v))


def core_potential_energy(sol: Solution) -> float:
    """eps^-2 int (phi)_+^(p+1), with the quadrature of the nonlinear term."""
    s = sol.state
    return s.integrate(np.maximum(s.at_quadrature(sol.phi), 0.0) ** (s.p + 1)) / s.eps**2


def energy_decomposition_defect(sol: Solution) -> float:
    """2c - ln(1/eps) eps^-2 int phi_+^p q - (p-1)/(p+1) eps^-2 int phi_+^(p+1).

    Vanishes for any critical point; with the solver's quadrature the
    cancellation is exact up to the Nehari defect.
    """
    s = sol.state
    plus = np.maximum(s.at_quadrature(sol.phi), 0.0)
    qq = s.at_quadrature(s.q)
    first = s.log_inv_eps * s.integrate(plus**s.p * qq) / s.eps**2
    second = (s.p - 1) / (s.p + 1) * s.integrate(plus ** (s.p + 1)) / s.eps**2
    return 2.0 * sol.energy - first - second


def core_report(sol: Solution) -> CoreReport:
    mesh = sol.state.mesh
    eps = sol.state.eps
    core = vortex_core(sol)
    geo = core_metrics(core, mesh, sol.phi)
    log_inv = math.log(1.0 / eps)
    diam = geo.diam
    if diam > 0 and geo.dist_boundary > 0:
        dlr = math.log(geo.dist_boundary / diam) / log_inv
    else:
        dlr = float("nan")
    return CoreReport(
        eps=eps,
        core=core,
        diam=diam,
        dist_boundary=geo.dist_boundary,
        centroid=geo.centroid,
        components=geo.components,
        circulation=circulation(sol),
        core_energy=core_energy(sol),
        energy_ratio=sol.energy / log_inv,
        diam_log_ratio=dlr,
        diam_over_eps=diam / eps,
        logdiam_over_logeps=math.log(diam) / math.log(eps) if diam > 0 else float("nan"),
        flags=tuple(sol.flags),
    )


# -- predicted limits --------------------------------------------------------
def concentration_function(points, q_values, k):
    """q^2 sqrt(det K_H) = q^2 k / sqrt(k^2 + |x|^2)."""
    return np.asarray(q_values) ** 2 * sqrt_det_k(points, k)


def _pick(points, f):
    fmin = float(f.min())
    cand = np.flatnonzero(f <= fmin + 1e-12 * abs(fmin))
    ang = np.mod(np.arctan2(points[cand, 1], points[cand, 0]), 2 * np.pi)
    order = np.lexsort((f[cand], ang))
    return cand[order[0]], len(cand)


def predicted_limits(mesh: Mesh, q, k: float) -> PredictedLimits:
    """x*, pi min q^2 sqrt(det K_H) and 2 pi q(x*) sqrt(det K_H(x*)).

    Candidates are the vertices and the boundary-edge midpoints; ties are
    broken by the smallest polar angle in [0, 2 pi).
    """
    q = check_field(mesh, q, "q")
    e = mesh.boundary_edges
    pts = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])])
    qv = np.concatenate([q, 0.5 * (q[e[:, 0]] + q[e[:, 1]])])
    f = concentration_function(pts, qv, k)
    i, mult = _pick(pts, f)
    x = pts[i]
    return PredictedLimits(
        x_star=x.copy(),
        energy_limit=float(math.pi * f[i]),
        circulation_limit=float(2 * math.pi * qv[i] * sqrt_det_k(x, k)),
        interior=bool(distance_to_boundary(mesh, x) > 2 * mesh.h),
        multiplicity=int(mult),
    )


def refined_grid_argmin(mesh: Mesh, q, k: float, factor: int = 10):
    """Argmin of q^2 sqrt(det K_H) over a ``factor``-times refined lattice of every triangle.

    q is evaluated through its P1 interpolant; returns (point, value).
    """
    q = check_field(mesh, q, "q")
    n = int(factor)
    ij = np.array([(i, j) for i in range(n + 1) for j in range(n + 1 - i)], dtype=float) / n
    bary = np.column_stack([1.0 - ij.sum(axis=1), ij])  # (S, 3)
    best_f, best_x = np.inf, None
    chunk = 20000
    for s in range(0, mesh.n_triangles, chunk):
        tri = mesh.triangles[s : s + chunk]
        pts = np.einsum("sj,tjd->tsd", bary, mesh.vertices[tri]).reshape(-1, 2)
        qs = np.einsum("sj,tj->ts", bary, q[tri]).ravel()
        f = concentration_function(pts, qs, k)
        i = int(np.argmin(f))
        if f[i] < best_f:
            best_f, best_x = float(f[i]), pts[i].copy()
    return best_x, best_f


# -- convergence -------------------------------------------------------------
def trend_verdict(values, target, window=3):
    values = np.asarray(values, dtype=float)[-window:]
    dev = np.abs(values - target) if target is not None else values
    if not np.all(np.isfinite(dev)):
        return Trend("fail", tuple(values), target, tuple(dev))
    steps = np.diff(dev)
    scale = max(float(np.abs(dev).max()), 1e-300)
    if np.all(np.abs(steps) <= 1e-12 * scale):
        status = "stagnant"
    elif np.all(steps < 0):
        status = "pass"
    else:
        status = "fail"
    return Trend(status, tuple(values), target, tuple(dev))


def table_row(r: CoreReport, pred: PredictedLimits):
    return {
        "eps": r.eps,
        "c_over_log": r.energy_ratio,
        "kappa": r.circulation,
        "diam": r.diam,
        "diam_over_eps": r.diam_over_eps,
        "logdiam_over_logeps": r.logdiam_over_logeps,
        "centroid_x": float(r.centroid[0]),
        "centroid_y": float(r.centroid[1]),
        "dist_to_xstar": float(np.hypot(*(r.centroid - pred.x_star))),
        "components": int(r.components),
        "core_energy": r.core_energy,
    }


def convergence_report(reports, pred: PredictedLimits, window: int = 3, eps_window: float = 4.0) -> ConvergenceTable:
    """Per-eps rows and trend verdicts toward the predicted limits.

    A trend passes when the deviation from the target decreases strictly
    over the last ``window`` eps values. The diam/eps window applies only
    to interior minimisers and passes when max/min of diam/eps over the
    sequence stays below ``eps_window``.
    """
    reports = list(reports)
    if len(reports) < 2:
        raise InsufficientData("a convergence report needs at least two eps values")
    rows = [table_row(r, pred) for r in reports]
    col = {c: [row[c] for row in rows] for c in CSV_COLUMNS}
    trends = {
        "energy_ratio": trend_verdict(col["c_over_log"], pred.energy_limit, window),
        "circulation": trend_verdict(col["kappa"], pred.circulation_limit, window),
        "log_diameter": trend_verdict(col["logdiam_over_logeps"], 1.0, window),
        "centroid": trend_verdict(col["dist_to_xstar"], None, window),
    }
    de = np.asarray(col["diam_over_eps"])
    if pred.interior:
        spread = float(de.max() / de.min()) if de.min() > 0 else float("inf")
        status = "pass" if spread <= eps_window else "fail"
        trends["diam_over_eps"] = Trend(status, tuple(de), None, (spread,))
    else:
        trends["diam_over_eps"] = Trend("not-applicable", tuple(de), None)
    return ConvergenceTable(rows=rows, trends=trends, limits=pred)


def write_convergence_csv(path, rows, comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(["%.12g" % row[c] for c in CSV_COLUMNS])


def read_convergence_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    rows = []
    for rec in reader:
        row = {c: float(rec[c]) for c in CSV_COLUMNS}
        row["components"] = int(row["components"])
        rows.append(row)
    return rows
