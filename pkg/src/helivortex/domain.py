"""Triangulated planar cross-sections and simple geometric queries.

Meshes are built deterministically: concentric rings for disks and
ellipses, Delaunay triangulation of boundary samples plus an interior
lattice for polygons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.spatial import Delaunay

from .errors import EmptyInput, InvalidSpec

__all__ = [
    "DomainSpec",
    "Mesh",
    "build_domain",
    "rotate_mesh",
    "rotation_matrix",
    "distance_to_boundary",
    "write_mesh",
    "read_mesh",
]


@dataclass(frozen=True)
class DomainSpec:
    """Shape description for a simply connected cross-section.

    ``shape`` is one of ``"disk"``, ``"ellipse"`` or ``"polygon"``; the
    relevant geometric parameters are ``center``/``radius``,
    ``center``/``semi_axes`` or ``vertices``.
    """

    shape: str
    target_h: float
    center: tuple = (0.0, 0.0)
    radius: float | None = None
    semi_axes: tuple | None = None
    vertices: tuple | None = None

    @classmethod
    def disk(cls, center, radius, h):
        return cls("disk", float(h), center=tuple(map(float, center)), radius=float(radius))

    @classmethod
    def ellipse(cls, center, semi_axes, h):
        return cls(
            "ellipse",
            float(h),
            center=tuple(map(float, center)),
            semi_axes=tuple(map(float, semi_axes)),
        )

    @classmethod
    def polygon(cls, vertices, h):
        return cls("polygon", float(h), vertices=tuple(tuple(map(float, v)) for v in vertices))

    def to_dict(self):
        d = {"shape": self.shape, "target_h": self.target_h}
        if self.shape == "disk":
            d.update(center=list(self.center), radius=self.radius)
        elif self.shape == "ellipse":
            d.update(center=list(self.center), semi_axes=list(self.semi_axes))
        else:
            d.update(vertices=[list(v) for v in self.vertices])
        return d


def _readonly(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable P1 triangulation with an oriented boundary loop.

    Attributes
    ----------
    vertices : (N, 2) float array
    triangles : (M, 3) int array, counter-clockwise
    boundary_edges : (B, 2) int array, ordered as one closed loop with the
        domain on the left
    normals : (B, 2) float array, outward unit normal per boundary edge
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    normals: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "vertices", _readonly(self.vertices, float))
        object.__setattr__(self, "triangles", _readonly(self.triangles, np.int64))
        object.__setattr__(self, "boundary_edges", _readonly(self.boundary_edges, np.int64))
        object.__setattr__(self, "normals", _readonly(self.normals, float))

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @cached_property
    def signed_areas(self):
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def areas(self):
        return self.signed_areas

    @cached_property
    def area(self):
        return float(self.signed_areas.sum())

    @cached_property
    def barycenters(self):
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def edge_lengths(self):
        p = self.vertices[self.triangles]
        return np.linalg.norm(p[:, [1, 2, 0]] - p, axis=2)

    @cached_property
    def h(self):
        """Maximum edge length."""
        return float(self.edge_lengths.max())

    @cached_property
    def boundary_vertices(self):
        """Boundary vertex indices in loop order."""
        return self.boundary_edges[:, 0].copy()

    @cached_property
    def boundary_mask(self):
        m = np.zeros(self.n_vertices, dtype=bool)
        m[self.boundary_edges.ravel()] = True
        return m

    @cached_property
    def interior(self):
        return np.flatnonzero(~self.boundary_mask)

    @cached_property
    def boundary_lengths(self):
        e = self.vertices[self.boundary_edges]
        return np.linalg.norm(e[:, 1] - e[:, 0], axis=1)

    @cached_property
    def boundary_triangle(self):
        """Index of the triangle adjacent to each boundary edge."""
        lookup = {}
        for t, tri in enumerate(self.triangles):
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                lookup[(int(a), int(b))] = t
        return np.array([lookup[(int(a), int(b))] for a, b in self.boundary_edges], dtype=np.int64)

    @cached_property
    def gradients(self):
        """Constant gradients of the three hat functions on every triangle, shape (M, 3, 2)."""
        p = self.vertices[self.triangles]
        x, y = p[..., 0], p[..., 1]
        twice = 2.0 * self.signed_areas[:, None]
        gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / twice
        gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / twice
        return np.stack([gx, gy], axis=2)

    @cached_property
    def lumped_mass(self):
        m = np.zeros(self.n_vertices)
        np.add.at(m, self.triangles, np.repeat(self.signed_areas[:, None] / 3.0, 3, axis=1))
        return m

    @cached_property
    def triangle_neighbors(self):
        """(M, 3) neighbor across the edge opposite each local vertex, -1 on the boundary."""
        edges = {}
        nb = -np.ones((self.n_triangles, 3), dtype=np.int64)
        for t, tri in enumerate(self.triangles):
            for j in range(3):
                a, b = int(tri[(j + 1) % 3]), int(tri[(j + 2) % 3])
                key = (a, b) if a < b else (b, a)
                if key in edges:
                    s, i = edges.pop(key)
                    nb[t, j] = s
                    nb[s, i] = t
                else:
                    edges[key] = (t, j)
        return nb

    def field_gradient(self, values):
        """Piecewise-constant gradient of a nodal field, shape (M, 2)."""
        v = np.asarray(values, dtype=float)[self.triangles]
        return np.einsum("tj,tjd->td", v, self.gradients)


def _boundary_loop(triangles, n_vertices):
    """Extract the boundary loop from CCW triangles; raise if not a single loop."""
    count = {}
    for tri in triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            count[key] = count.get(key, 0) + 1
    succ = {}
    for tri in triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            if count[(min(a, b), max(a, b))] == 1:
                if a in succ:
                    raise InvalidSpec("boundary is not a simple closed curve")
                succ[int(a)] = int(b)
    if not succ:
        raise InvalidSpec("mesh has no boundary")
    start = min(succ)
    loop = [start]
    cur = succ[start]
    while cur != start:
        loop.append(cur)
        cur = succ.get(cur)
        if cur is None or len(loop) > len(succ):
            raise InvalidSpec("boundary edges do not close")
    if len(loop) != len(succ):
        raise InvalidSpec("boundary consists of several loops (domain not simply connected)")
    loop = np.array(loop, dtype=np.int64)
    return np.stack([loop, np.roll(loop, -1)], axis=1)


def _outward_normals(vertices, edges):
    t = vertices[edges[:, 1]] - vertices[edges[:, 0]]
    t /= np.linalg.norm(t, axis=1)[:, None]
    return np.stack([t[:, 1], -t[:, 0]], axis=1)


def mesh_from_arrays(vertices, triangles):
    """Orient triangles counter-clockwise, drop degenerate ones and attach the boundary."""
    vertices = np.asarray(vertices, dtype=float)
    tri = np.asarray(triangles, dtype=np.int64).copy()
    p = vertices[tri]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    scale = np.maximum(np.einsum("ij,ij->i", e1, e1), np.einsum("ij,ij->i", e2, e2))
    keep = np.abs(cross) > 1e-12 * scale
    tri, cross = tri[keep], cross[keep]
    flip = cross < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    used = np.unique(tri)
    if len(used) != len(vertices):
        remap = -np.ones(len(vertices), dtype=np.int64)
        remap[used] = np.arange(len(used))
        vertices = vertices[used]
        tri = remap[tri]
    edges = _boundary_loop(tri, len(vertices))
    return Mesh(vertices, tri, edges, _outward_normals(vertices, edges))


def _disk_points(center, radius, h):
    n_rings = max(2, math.ceil(radius / h))
    pts = [np.zeros((1, 2))]
    for i in range(1, n_rings + 1):
        r = radius * i / n_rings
        n = max(6, math.ceil(2.0 * math.pi * r / h))
        offset = 0.0 if (n_rings - i) % 2 == 0 else math.pi / n
        th = offset + 2.0 * math.pi * np.arange(n) / n
        pts.append(np.stack([r * np.cos(th), r * np.sin(th)], axis=1))
    return np.concatenate(pts) + np.asarray(center, dtype=float)


def _ellipse_ring(a, b, h, offset_fraction):
    # equal arc-length sampling of x = a cos t, y = b sin t
    t = np.linspace(0.0, 2.0 * math.pi, 4097)
    speed = np.hypot(a * np.sin(t), b * np.cos(t))
    s = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(t))])
    n = max(6, math.ceil(s[-1] / h))
    targets = (np.arange(n) + offset_fraction) * s[-1] / n
    tt = np.interp(targets, s, t)
    return np.stack([a * np.cos(tt), b * np.sin(tt)], axis=1)


def _ellipse_points(center, semi_axes, h):
    a, b = semi_axes
    n_rings = max(2, math.ceil(max(a, b) / h))
    pts = [np.zeros((1, 2))]
    for i in range(1, n_rings + 1):
        s = i / n_rings
        off = 0.0 if (n_rings - i) % 2 == 0 else 0.5
        pts.append(_ellipse_ring(a * s, b * s, h, off))
    return np.concatenate(pts) + np.asarray(center, dtype=float)


def _segments_cross(p1, p2, p3, p4):
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 * d2 < 0 and d3 * d4 < 0:
        return True
    # collinear overlap counts as an intersection as well
    for d, a, b, c in ((d1, p3, p4, p1), (d2, p3, p4, p2), (d3, p1, p2, p3), (d4, p1, p2, p4)):
        if d == 0 and min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]):
            return True
    return False


def _check_simple_polygon(poly):
    n = len(poly)
    if n < 3:
        raise InvalidSpec("polygon needs at least 3 vertices")
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]):
                raise InvalidSpec(f"polygon edges {i} and {j} intersect")
    area = 0.5 * np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
    if abs(area) < 1e-14:
        raise InvalidSpec("polygon has zero area")
    return poly if area > 0 else poly[::-1].copy()


def _points_in_polygon(pts, poly):
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    n = len(poly)
    for i in range(n):
        (x1, y1), (x2, y2) = poly[i], poly[(i + 1) % n]
        cond = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= cond & (x < xint)
    return inside


def _segment_distance(points, a, b):
    """Distance from each point to each segment, shape (P, S)."""
    ab = b - a
    denom = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-300)
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("psd,sd->ps", ap, ab) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


def _polygon_points(poly, h):
    h = 0.85 * h
    bnd = []
    for i in range(len(poly)):
        a, b = poly[i], poly[(i + 1) % len(poly)]
        n = max(1, math.ceil(np.linalg.norm(b - a) / h))
        s = np.arange(n) / n
        bnd.append(a + s[:, None] * (b - a))
    bnd = np.concatenate(bnd)
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    dy = h * math.sqrt(3.0) / 2.0
    rows = []
    for j, y in enumerate(np.arange(lo[1] + dy / 2, hi[1], dy)):
        xs = np.arange(lo[0] + (h / 2 if j % 2 else 0.0), hi[0] + h, h)
        rows.append(np.stack([xs, np.full_like(xs, y)], axis=1))
    lattice = np.concatenate(rows) if rows else np.zeros((0, 2))
    lattice = lattice[_points_in_polygon(lattice, poly)]
    if len(lattice):
        d = _segment_distance(lattice, poly, np.roll(poly, -1, axis=0)).min(axis=1)
        lattice = lattice[d > 0.4 * h]
    return bnd, lattice


def build_domain(spec: DomainSpec) -> Mesh:
    """Triangulate ``spec`` at mesh size ``spec.target_h``."""
    h = spec.target_h
    if not (h > 0 and math.isfinite(h)):
        raise InvalidSpec("target_h must be positive")
    if spec.shape == "disk":
        if spec.radius is None or not spec.radius > 0:
            raise InvalidSpec("disk radius must be positive")
        pts = _disk_points(spec.center, spec.radius, h)
        tri = Delaunay(pts).simplices
        return mesh_from_arrays(pts, tri)
    if spec.shape == "ellipse":
        if spec.semi_axes is None or min(spec.semi_axes) <= 0:
            raise InvalidSpec("ellipse semi-axes must be positive")
        pts = _ellipse_points(spec.center, spec.semi_axes, h)
        tri = Delaunay(pts).simplices
        return mesh_from_arrays(pts, tri)
    if spec.shape == "polygon":
        if spec.vertices is None:
            raise InvalidSpec("polygon requires vertices")
        poly = _check_simple_polygon(np.asarray(spec.vertices, dtype=float))
        bnd, lattice = _polygon_points(poly, h)
        pts = np.concatenate([bnd, lattice])
        tri = Delaunay(pts).simplices
        centroids = pts[tri].mean(axis=1)
        tri = tri[_points_in_polygon(centroids, poly)]
        mesh = mesh_from_arrays(pts, tri)
        if mesh.boundary_edges.shape[0] != len(bnd):
            raise InvalidSpec("could not recover polygon boundary; decrease target_h")
        return mesh
    raise InvalidSpec(f"unknown shape {spec.shape!r}")


def rotation_matrix(theta):
    """Clockwise rotation through ``theta``: (x, y) -> (x cos + y sin, -x sin + y cos)."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, s], [-s, c]])


def rotate_mesh(mesh: Mesh, theta: float) -> Mesh:
    """Rotate vertices and normals clockwise by ``theta``; connectivity is unchanged."""
    r = rotation_matrix(theta)
    return Mesh(mesh.vertices @ r.T, mesh.triangles, mesh.boundary_edges, mesh.normals @ r.T)


def distance_to_boundary(mesh: Mesh, points) -> float:
    """Smallest distance from any of ``points`` to the boundary polygon."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        raise EmptyInput("no points given")
    a = mesh.vertices[mesh.boundary_edges[:, 0]]
    b = mesh.vertices[mesh.boundary_edges[:, 1]]
    best = np.inf
    chunk = max(1, 2_000_000 // max(len(a), 1))
    for i in range(0, len(pts), chunk):
        best = min(best, float(_segment_distance(pts[i : i + chunk], a, b).min()))
    return best


def write_mesh(path, mesh: Mesh, comment: str | None = None):
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(f"vertices {mesh.n_vertices} triangles {mesh.n_triangles} boundary {len(mesh.boundary_edges)}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"{a} {b} {c}\n")
        for (a, b), (nx, ny) in zip(mesh.boundary_edges, mesh.normals):
            fh.write(f"{a} {b} {nx:.17g} {ny:.17g}\n")


def read_mesh(path) -> Mesh:
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    head = lines[0].split()
    if head[0::2] != ["vertices", "triangles", "boundary"]:
        raise ValueError(f"{path}: bad mesh header {lines[0]!r}")
    n, m, b = (int(v) for v in head[1::2])
    body = lines[1:]
    verts = np.array([[float(v) for v in ln.split()] for ln in body[:n]])
    tris = np.array([[int(v) for v in ln.split()] for ln in body[n : n + m]], dtype=np.int64)
    bl = [ln.split() for ln in body[n + m : n + m + b]]
    edges = np.array([[int(r[0]), int(r[1])] for r in bl], dtype=np.int64)
    normals = np.array([[float(r[2]), float(r[3])] for r in bl])
    return Mesh(verts, tris, edges, normals)


def polygon_area(points: Sequence) -> float:
    p = np.asarray(points, dtype=float)
    return 0.5 * float(np.sum(p[:, 0] * np.roll(p[:, 1], -1) - np.roll(p[:, 0], -1) * p[:, 1]))
