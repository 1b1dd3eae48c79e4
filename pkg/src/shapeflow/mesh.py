"""Interface-fitted triangular meshes.

A mesh partitions a fixed outer domain into labelled triangle regions
separated by closed interface polylines (the discrete shapes).  Meshes are
immutable after construction: every deformation returns a new ``Mesh``
sharing connectivity arrays with its parent.

File formats: an ASCII Gmsh v2.2 subset (reader + writer) where triangle
physical names are region labels, line physical names are ``boundary`` or
``interface*``; and legacy ASCII VTK (writer only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .errors import (
    GenerationError,
    GeometryError,
    MeshFormatError,
    MeshTopologyError,
)

__all__ = [
    "Mesh",
    "InterfaceLoop",
    "MeshQualityReport",
    "Rectangle",
    "Ellipse",
    "CircleLoop",
    "PolylineLoop",
    "generate_fitted_mesh",
    "parse_msh",
    "write_msh",
    "write_vtk",
    "apply_displacement",
    "mesh_quality",
    "loops_are_simple",
]

MIN_ANGLE_FLOOR = math.radians(1.0)


# ---------------------------------------------------------------------------
# basic geometry helpers


def _signed_areas(nodes, triangles):
    a = nodes[triangles[:, 0]]
    b = nodes[triangles[:, 1]]
    c = nodes[triangles[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                  - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def _polygon_signed_area(pts):
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def points_in_polygon(pts, poly):
    """Ray-casting point-in-polygon test, vectorized over ``pts``."""
    pts = np.asarray(pts, dtype=float)
    px, py = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    x1, y1 = poly[:, 0], poly[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    for ex1, ey1, ex2, ey2 in zip(x1, y1, x2, y2):
        crosses = (ey1 > py) != (ey2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = ex1 + (py - ey1) * (ex2 - ex1) / (ey2 - ey1)
        inside ^= crosses & (px < xint)
    return inside


def _dist_points_to_segments(pts, seg_a, seg_b):
    """Min distance from each point to a set of segments. Shapes: (n,2),(m,2),(m,2)."""
    d = seg_b - seg_a                                    # (m,2)
    len2 = np.maximum(np.einsum("ij,ij->i", d, d), 1e-300)
    diff = pts[:, None, :] - seg_a[None, :, :]           # (n,m,2)
    t = np.clip(np.einsum("nmj,mj->nm", diff, d) / len2, 0.0, 1.0)
    proj = seg_a[None, :, :] + t[:, :, None] * d[None, :, :]
    return np.sqrt(((pts[:, None, :] - proj) ** 2).sum(axis=2)).min(axis=1)


def _segments_intersect(p1, p2, q1, q2):
    """Proper or touching intersection of segments p1p2 and q1q2."""

    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(v) < 1e-15:
            return 0
        return 1 if v > 0 else -1

    def on_seg(a, b, c):
        return (min(a[0], b[0]) - 1e-15 <= c[0] <= max(a[0], b[0]) + 1e-15
                and min(a[1], b[1]) - 1e-15 <= c[1] <= max(a[1], b[1]) + 1e-15)

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p1, p2, q1):
        return True
    if o2 == 0 and on_seg(p1, p2, q2):
        return True
    if o3 == 0 and on_seg(q1, q2, p1):
        return True
    if o4 == 0 and on_seg(q1, q2, p2):
        return True
    return False


def _polyline_min_distance(pa, pb):
    """Min distance between two closed polylines (0 if they intersect)."""
    a1, a2 = pa, np.roll(pa, -1, axis=0)
    b1, b2 = pb, np.roll(pb, -1, axis=0)
    for i in range(len(a1)):
        for j in range(len(b1)):
            if _segments_intersect(a1[i], a2[i], b1[j], b2[j]):
                return 0.0
    d1 = _dist_points_to_segments(pa, b1, b2).min()
    d2 = _dist_points_to_segments(pb, a1, a2).min()
    return min(d1, d2)


def _polygon_is_simple(pts):
    n = len(pts)
    for i in range(n):
        a1, a2 = pts[i], pts[(i + 1) % n]
        for j in range(i + 1, n):
            # skip adjacent segments (share a vertex)
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_intersect(a1, a2, pts[j], pts[(j + 1) % n]):
                return False
    return True


# ---------------------------------------------------------------------------
# core types


@dataclass
class InterfaceLoop:
    """Closed interface polyline, node indices ordered counter-clockwise.

    Counter-clockwise means the enclosed (``region``) side lies to the left
    of the direction of travel, so the outward normal of segment a->b is
    the rotated tangent (t_y, -t_x).
    """

    nodes: np.ndarray        # (k,) int, closed implicitly (last -> first)
    region: str              # label of the enclosed region

    def polygon(self, coords):
        return coords[self.nodes]

    def segment_lengths(self, coords):
        p = coords[self.nodes]
        d = np.roll(p, -1, axis=0) - p
        return np.hypot(d[:, 0], d[:, 1])

    def outward_normals(self, coords):
        p = coords[self.nodes]
        d = np.roll(p, -1, axis=0) - p
        lens = np.hypot(d[:, 0], d[:, 1])
        return np.stack([d[:, 1], -d[:, 0]], axis=1) / lens[:, None]

    def segments(self):
        """Node index pairs (a, b) in loop order."""
        return np.stack([self.nodes, np.roll(self.nodes, -1)], axis=1)


@dataclass
class MeshQualityReport:
    min_signed_area: float
    min_angle: float          # radians
    max_aspect_ratio: float   # circumradius / (2 * inradius), 1 for equilateral
    inverted_count: int
    min_interface_segment: float

    @property
    def valid(self):
        return self.inverted_count == 0 and self.min_angle > MIN_ANGLE_FLOOR


@dataclass
class Mesh:
    """Interface-fitted triangulation of a fixed outer domain.

    Treated as immutable; node/triangle arrays are marked read-only.
    """

    nodes: np.ndarray                  # (N_v, 2) float64
    triangles: np.ndarray              # (N_t, 3) int, counter-clockwise
    regions: np.ndarray                # (N_t,) int index into region_names
    region_names: tuple
    boundary_edges: np.ndarray         # (N_b, 2) int
    loops: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.regions = np.ascontiguousarray(self.regions, dtype=np.int64)
        self.boundary_edges = np.ascontiguousarray(self.boundary_edges, dtype=np.int64)
        for arr in (self.nodes, self.triangles, self.regions, self.boundary_edges):
            arr.flags.writeable = False
        self.region_names = tuple(self.region_names)
        self.loops = tuple(self.loops)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @cached_property
    def signed_areas(self):
        return _signed_areas(self.nodes, self.triangles)

    @cached_property
    def boundary_node_set(self):
        return np.unique(self.boundary_edges)

    @cached_property
    def interface_node_set(self):
        if not self.loops:
            return np.array([], dtype=np.int64)
        return np.unique(np.concatenate([lp.nodes for lp in self.loops]))

    @cached_property
    def interface_edges(self):
        """All interface segments as (a, b) index pairs, loop order."""
        if not self.loops:
            return np.zeros((0, 2), dtype=np.int64)
        return np.concatenate([lp.segments() for lp in self.loops])

    @cached_property
    def edge_triangle_map(self):
        """dict: sorted node pair -> list of adjacent triangle indices."""
        emap = {}
        for t, tri in enumerate(self.triangles):
            for i in range(3):
                key = (min(tri[i], tri[(i + 1) % 3]), max(tri[i], tri[(i + 1) % 3]))
                emap.setdefault(key, []).append(t)
        return emap

    def region_of(self, name):
        return self.region_names.index(name)

    def triangle_region_names(self):
        return [self.region_names[r] for r in self.regions]


# ---------------------------------------------------------------------------
# quality and deformation


def mesh_quality(mesh):
    """Audit triangle shapes and interface segments; never raises."""
    areas = _signed_areas(mesh.nodes, mesh.triangles)
    inverted = int(np.sum(areas <= 0))

    a = mesh.nodes[mesh.triangles[:, 0]]
    b = mesh.nodes[mesh.triangles[:, 1]]
    c = mesh.nodes[mesh.triangles[:, 2]]
    la = np.linalg.norm(b - c, axis=1)
    lb = np.linalg.norm(c - a, axis=1)
    lc = np.linalg.norm(a - b, axis=1)

    ok = areas > 0
    if np.any(ok):
        # interior angles from the cross/dot products at each vertex
        def angles(p, q, r):
            u, v = q - p, r - p
            return np.arctan2(np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]),
                              np.einsum("ij,ij->i", u, v))

        ang = np.minimum.reduce([angles(a, b, c), angles(b, c, a), angles(c, a, b)])
        min_angle = float(ang[ok].min())
        s = 0.5 * (la + lb + lc)
        aspect = (la * lb * lc * s) / (8.0 * areas ** 2)
        max_aspect = float(aspect[ok].max())
    else:
        min_angle = 0.0
        max_aspect = math.inf

    if mesh.loops:
        min_seg = float(min(lp.segment_lengths(mesh.nodes).min() for lp in mesh.loops))
    else:
        min_seg = math.inf

    return MeshQualityReport(
        min_signed_area=float(areas.min()),
        min_angle=min_angle if inverted == 0 else 0.0,
        max_aspect_ratio=max_aspect,
        inverted_count=inverted,
        min_interface_segment=min_seg,
    )


def loops_are_simple(mesh):
    """True if every interface loop is simple and loops are pairwise disjoint."""
    polys = [lp.polygon(mesh.nodes) for lp in mesh.loops]
    for p in polys:
        if not _polygon_is_simple(p):
            return False
    for i in range(len(polys)):
        for j in range(i + 1, len(polys)):
            if _polyline_min_distance(polys[i], polys[j]) == 0.0:
                return False
    return True


def apply_displacement(mesh, V, t):
    """Perturbation of identity x -> x + t V(x); connectivity unchanged."""
    vals = getattr(V, "values", V)
    vals = np.asarray(vals, dtype=float).reshape(mesh.n_nodes, 2)
    new_nodes = mesh.nodes + t * vals
    return Mesh(new_nodes, mesh.triangles, mesh.regions, mesh.region_names,
                mesh.boundary_edges, mesh.loops)


# ---------------------------------------------------------------------------
# outer-domain and loop specifications


@dataclass(frozen=True)
class Rectangle:
    x0: float
    x1: float
    y0: float
    y1: float

    def boundary_polygon(self, h):
        nx = max(1, round((self.x1 - self.x0) / h))
        ny = max(1, round((self.y1 - self.y0) / h))
        xs = np.linspace(self.x0, self.x1, nx + 1)
        ys = np.linspace(self.y0, self.y1, ny + 1)
        pts = []
        pts += [(x, self.y0) for x in xs[:-1]]
        pts += [(self.x1, y) for y in ys[:-1]]
        pts += [(x, self.y1) for x in xs[::-1][:-1]]
        pts += [(self.x0, y) for y in ys[::-1][:-1]]
        return np.array(pts)

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass(frozen=True)
class Ellipse:
    a: float
    b: float

    def boundary_polygon(self, h):
        # Ramanujan perimeter estimate sets the inscribed-polygon resolution
        per = math.pi * (3 * (self.a + self.b)
                         - math.sqrt((3 * self.a + self.b) * (self.a + 3 * self.b)))
        n = max(16, int(round(per / h)))
        th = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
        return np.stack([self.a * np.cos(th), self.b * np.sin(th)], axis=1)

    @property
    def area(self):
        return math.pi * self.a * self.b


@dataclass(frozen=True)
class CircleLoop:
    cx: float
    cy: float
    r: float
    segments: int = 0        # 0 -> derived from the mesh resolution
    region: str = "in"

    def polygon(self, h):
        n = self.segments if self.segments > 0 else max(12, int(round(2 * math.pi * self.r / h)))
        th = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
        return np.stack([self.cx + self.r * np.cos(th),
                         self.cy + self.r * np.sin(th)], axis=1)


@dataclass(frozen=True)
class PolylineLoop:
    points: np.ndarray       # (k, 2), closed implicitly
    region: str = "in"

    def polygon(self, h):
        pts = np.asarray(self.points, dtype=float)
        if len(pts) > 1 and np.allclose(pts[0], pts[-1]):
            pts = pts[:-1]
        return pts


# ---------------------------------------------------------------------------
# mesh generation


def _hex_lattice(bbox, h):
    x0, x1, y0, y1 = bbox
    dy = h * math.sqrt(3.0) / 2.0
    rows = int(math.floor((y1 - y0) / dy)) + 1
    pts = []
    for j in range(rows + 1):
        y = y0 + j * dy
        if y > y1 + 1e-12:
            break
        off = 0.5 * h if j % 2 else 0.0
        xs = np.arange(x0 + off, x1 + 1e-12, h)
        pts.append(np.stack([xs, np.full_like(xs, y)], axis=1))
    return np.concatenate(pts) if pts else np.zeros((0, 2))


def _orient_ccw(nodes, triangles):
    areas = _signed_areas(nodes, triangles)
    flip = areas < 0
    if np.any(flip):
        triangles = triangles.copy()
        triangles[flip, 1], triangles[flip, 2] = (triangles[flip, 2].copy(),
                                                  triangles[flip, 1].copy())
    return triangles


def _laplacian_smooth(nodes, triangles, free_mask, passes):
    """Guarded Laplacian smoothing: a node moves only if no incident
    triangle degenerates."""
    n = len(nodes)
    neighbors = [set() for _ in range(n)]
    incident = [[] for _ in range(n)]
    for t, tri in enumerate(triangles):
        for i in range(3):
            a, b = tri[i], tri[(i + 1) % 3]
            neighbors[a].add(b)
            neighbors[b].add(a)
        for v in tri:
            incident[v].append(t)
    nodes = nodes.copy()
    free_idx = np.nonzero(free_mask)[0]
    for _ in range(passes):
        for v in free_idx:
            nb = list(neighbors[v])
            target = nodes[nb].mean(axis=0)
            old = nodes[v].copy()
            nodes[v] = target
            tris = triangles[incident[v]]
            if np.any(_signed_areas(nodes, tris) <= 1e-14):
                nodes[v] = old
    return nodes


def generate_fitted_mesh(outer, loops, h, outer_region="out", smooth_passes=5):
    """Build an interface-fitted mesh of ``outer`` with the given loops.

    Loop polygon vertices become mesh nodes verbatim; a cleared band around
    each polygon guarantees that consecutive loop vertices are joined by
    mesh edges of the Delaunay triangulation.  Regions are labelled by
    point-in-polygon tests of triangle centroids, then interior nodes are
    relaxed by guarded Laplacian smoothing.

    Raises GeometryError for violated clearances and GenerationError when
    the triangulation fails to conform (retry with smaller ``h``).
    """
    if h <= 0:
        raise GeometryError("target edge length h must be positive")
    boundary_poly = outer.boundary_polygon(h)
    loop_polys = [lp.polygon(h) for lp in loops]
    loop_regions = [lp.region for lp in loops]

    for i, lp in enumerate(loop_polys):
        if len(lp) < 3:
            raise GeometryError(f"loop {i} has fewer than 3 vertices")
        if not _polygon_is_simple(lp):
            raise GeometryError(f"loop {i} polygon is self-intersecting")
        if not points_in_polygon(lp, boundary_poly).all():
            raise GeometryError(f"loop {i} is not strictly inside the outer domain")
        d = _polyline_min_distance(lp, boundary_poly)
        if d <= 2 * h:
            raise GeometryError(
                f"loop {i} is within 2h of the outer boundary (dist {d:.4g})")
    for i in range(len(loop_polys)):
        for j in range(i + 1, len(loop_polys)):
            d = _polyline_min_distance(loop_polys[i], loop_polys[j])
            if d <= 2 * h:
                raise GeometryError(
                    f"loops {i} and {j} are within 2h of each other (dist {d:.4g})")

    bbox = (boundary_poly[:, 0].min(), boundary_poly[:, 0].max(),
            boundary_poly[:, 1].min(), boundary_poly[:, 1].max())
    lattice = _hex_lattice(bbox, h)
    keep = points_in_polygon(lattice, boundary_poly)
    b1, b2 = boundary_poly, np.roll(boundary_poly, -1, axis=0)
    if keep.any():
        keep[keep] &= _dist_points_to_segments(lattice[keep], b1, b2) > 0.65 * h
    for lp in loop_polys:
        seg_len = np.linalg.norm(np.roll(lp, -1, axis=0) - lp, axis=1).max()
        clear = max(0.62 * h, 0.80 * seg_len)
        if keep.any():
            keep[keep] &= _dist_points_to_segments(
                lattice[keep], lp, np.roll(lp, -1, axis=0)) > clear
    lattice = lattice[keep]

    parts = [boundary_poly] + loop_polys + [lattice]
    all_pts = np.concatenate(parts)
    n_bd = len(boundary_poly)
    loop_index_ranges = []
    pos = n_bd
    for lp in loop_polys:
        loop_index_ranges.append(np.arange(pos, pos + len(lp)))
        pos += len(lp)

    tri = Delaunay(all_pts)
    triangles = _orient_ccw(all_pts, tri.simplices.astype(np.int64))

    # drop degenerate slivers along collinear boundary stretches
    areas = _signed_areas(all_pts, triangles)
    scale = areas[areas > 0].max() if np.any(areas > 0) else 1.0
    triangles = triangles[areas > 1e-12 * scale]

    emap = {}
    for t, tt in enumerate(triangles):
        for i in range(3):
            key = (min(tt[i], tt[(i + 1) % 3]), max(tt[i], tt[(i + 1) % 3]))
            emap.setdefault(key, []).append(t)

    for i, idx in enumerate(loop_index_ranges):
        for a, b in zip(idx, np.roll(idx, -1)):
            key = (min(a, b), max(a, b))
            if key not in emap or len(emap[key]) != 2:
                raise GenerationError(
                    f"loop {i} segment {a}-{b} is not a conforming interior edge; "
                    "use a smaller h")

    centroids = all_pts[triangles].mean(axis=1)
    region_names = list(dict.fromkeys([outer_region] + loop_regions))
    regions = np.zeros(len(triangles), dtype=np.int64)
    containment = np.zeros(len(triangles), dtype=np.int64)
    for lp, reg in zip(loop_polys, loop_regions):
        inside = points_in_polygon(centroids, lp)
        containment += inside
        regions[inside] = region_names.index(reg)
    if np.any(containment > 1):
        raise GeometryError("nested interface loops are not supported")

    boundary_edges = sorted(k for k, v in emap.items() if len(v) == 1)
    boundary_edges = np.array(boundary_edges, dtype=np.int64).reshape(-1, 2)
    bd_nodes = np.unique(boundary_edges)
    if not np.all(bd_nodes < n_bd):
        raise GenerationError("hull edges touch interior nodes; use a smaller h")

    free = np.ones(len(all_pts), dtype=bool)
    free[np.unique(boundary_edges)] = False
    for idx in loop_index_ranges:
        free[idx] = False
    nodes = _laplacian_smooth(all_pts, triangles, free, smooth_passes)

    mesh_loops = []
    for idx, reg in zip(loop_index_ranges, loop_regions):
        poly = nodes[idx]
        if _polygon_signed_area(poly) < 0:
            idx = idx[::-1].copy()
        mesh_loops.append(InterfaceLoop(nodes=np.asarray(idx), region=reg))

    mesh = Mesh(nodes, triangles, regions, tuple(region_names),
                boundary_edges, tuple(mesh_loops))
    _validate(mesh, strict=True)
    report = mesh_quality(mesh)
    if not report.valid:
        raise GenerationError(
            f"generated mesh invalid ({report.inverted_count} inverted, "
            f"min angle {math.degrees(report.min_angle):.2f} deg); use a smaller h")
    return mesh


def _validate(mesh, strict):
    areas = _signed_areas(mesh.nodes, mesh.triangles)
    if np.any(areas <= 0):
        raise MeshTopologyError(f"{int(np.sum(areas <= 0))} non-positive-area triangles")
    emap = mesh.edge_triangle_map
    for key, tris in emap.items():
        if len(tris) > 2:
            raise MeshTopologyError(f"edge {key} shared by {len(tris)} triangles")
    hull = {k for k, v in emap.items() if len(v) == 1}
    listed = {(min(a, b), max(a, b)) for a, b in mesh.boundary_edges}
    if hull != listed:
        raise MeshTopologyError("boundary edge list does not match mesh hull")
    for li, lp in enumerate(mesh.loops):
        poly = lp.polygon(mesh.nodes)
        if _polygon_signed_area(poly) <= 0:
            raise MeshTopologyError(f"loop {li} is not counter-clockwise")
        if strict and not _polygon_is_simple(poly):
            raise MeshTopologyError(f"loop {li} is self-intersecting")
        reg_in = mesh.region_of(lp.region)
        for a, b in lp.segments():
            key = (min(a, b), max(a, b))
            tris = emap.get(key, [])
            if len(tris) != 2:
                raise MeshTopologyError(
                    f"interface edge {key} of loop {li} not shared by 2 triangles")
            r = sorted(mesh.regions[t] for t in tris)
            if reg_in not in r or r[0] == r[1]:
                raise MeshTopologyError(
                    f"interface edge {key} does not separate {lp.region} from outside")


# ---------------------------------------------------------------------------
# Gmsh v2.2 ASCII subset


def parse_msh(path):
    """Read the Gmsh v2.2 ASCII subset written by ``write_msh``.

    Physical names: triangle names are region labels; line elements named
    ``boundary`` become boundary edges and names matching ``interface*``
    are chained into closed interface loops.
    """
    with open(path, "r") as f:
        lines = f.read().splitlines()

    phys = {}           # tag -> (dim, name)
    nodes = None
    node_ids = {}
    tri_data = []       # (phys_tag, i, j, k)
    line_data = []      # (phys_tag, i, j)

    i = 0
    n = len(lines)

    def expect_end(idx, name):
        if idx >= n or lines[idx].strip() != f"$End{name}":
            raise MeshFormatError(f"missing $End{name}", line=idx + 1)

    while i < n:
        tok = lines[i].strip()
        if tok == "$MeshFormat":
            parts = lines[i + 1].split()
            if not parts or not parts[0].startswith("2.2"):
                raise MeshFormatError(f"unsupported mesh format {lines[i + 1]!r}",
                                      line=i + 2)
            expect_end(i + 2, "MeshFormat")
            i += 3
        elif tok == "$PhysicalNames":
            try:
                count = int(lines[i + 1])
            except (ValueError, IndexError):
                raise MeshFormatError("bad $PhysicalNames count", line=i + 2)
            for k in range(count):
                parts = lines[i + 2 + k].split(None, 2)
                if len(parts) != 3:
                    raise MeshFormatError("malformed physical name", line=i + 3 + k)
                dim, tag, name = int(parts[0]), int(parts[1]), parts[2].strip().strip('"')
                phys[tag] = (dim, name)
            expect_end(i + 2 + count, "PhysicalNames")
            i += 3 + count
        elif tok == "$Nodes":
            try:
                count = int(lines[i + 1])
            except (ValueError, IndexError):
                raise MeshFormatError("bad $Nodes count", line=i + 2)
            nodes = np.zeros((count, 2))
            for k in range(count):
                parts = lines[i + 2 + k].split()
                if len(parts) < 4:
                    raise MeshFormatError("malformed node line", line=i + 3 + k)
                node_ids[int(parts[0])] = k
                nodes[k] = (float(parts[1]), float(parts[2]))
            expect_end(i + 2 + count, "Nodes")
            i += 3 + count
        elif tok == "$Elements":
            try:
                count = int(lines[i + 1])
            except (ValueError, IndexError):
                raise MeshFormatError("bad $Elements count", line=i + 2)
            for k in range(count):
                parts = [int(x) for x in lines[i + 2 + k].split()]
                if len(parts) < 3:
                    raise MeshFormatError("malformed element line", line=i + 3 + k)
                etype, ntags = parts[1], parts[2]
                tags = parts[3:3 + ntags]
                conn = parts[3 + ntags:]
                ptag = tags[0] if tags else 0
                if etype == 1:
                    if len(conn) != 2:
                        raise MeshFormatError("line element needs 2 nodes", line=i + 3 + k)
                    line_data.append((ptag, conn[0], conn[1]))
                elif etype == 2:
                    if len(conn) != 3:
                        raise MeshFormatError("triangle element needs 3 nodes",
                                              line=i + 3 + k)
                    tri_data.append((ptag, conn[0], conn[1], conn[2]))
                else:
                    raise MeshFormatError(f"unsupported element type {etype}",
                                          line=i + 3 + k)
            expect_end(i + 2 + count, "Elements")
            i += 3 + count
        elif tok.startswith("$"):
            # skip unknown sections
            end = tok.replace("$", "$End", 1)
            j = i + 1
            while j < n and lines[j].strip() != end:
                j += 1
            if j >= n:
                raise MeshFormatError(f"unterminated section {tok}", line=i + 1)
            i = j + 1
        elif tok == "":
            i += 1
        else:
            raise MeshFormatError(f"unexpected content {tok!r}", line=i + 1)

    if nodes is None:
        raise MeshFormatError("missing $Nodes section")
    if not tri_data:
        raise MeshFormatError("missing triangle elements")

    def remap(nid, ln):
        try:
            return node_ids[nid]
        except KeyError:
            raise MeshFormatError(f"element references unknown node {nid}", line=ln)

    region_names = []
    regions = []
    triangles = []
    for ptag, a, b, c in tri_data:
        if ptag not in phys:
            raise MeshFormatError(f"triangle physical tag {ptag} has no name")
        name = phys[ptag][1]
        if name not in region_names:
            region_names.append(name)
        regions.append(region_names.index(name))
        triangles.append((remap(a, None), remap(b, None), remap(c, None)))
    triangles = np.array(triangles, dtype=np.int64)
    regions = np.array(regions, dtype=np.int64)

    areas = _signed_areas(nodes, triangles)
    if np.any(areas == 0):
        raise MeshTopologyError("degenerate (zero-area) triangle in file")
    triangles = _orient_ccw(nodes, triangles)

    boundary_edges = []
    iface_groups = {}
    for ptag, a, b in line_data:
        name = phys.get(ptag, (1, ""))[1]
        a, b = remap(a, None), remap(b, None)
        if name == "boundary":
            boundary_edges.append((min(a, b), max(a, b)))
        elif name.startswith("interface"):
            iface_groups.setdefault(name, []).append((a, b))
        else:
            raise MeshFormatError(f"unknown line physical name {name!r}")
    boundary_edges = np.array(sorted(boundary_edges), dtype=np.int64).reshape(-1, 2)

    emap = {}
    for t, tt in enumerate(triangles):
        for ii in range(3):
            key = (min(tt[ii], tt[(ii + 1) % 3]), max(tt[ii], tt[(ii + 1) % 3]))
            emap.setdefault(key, []).append(t)

    loops = []
    for name in sorted(iface_groups):
        for cycle in _chain_edges(iface_groups[name]):
            poly = nodes[cycle]
            if _polygon_signed_area(poly) < 0:
                cycle = cycle[::-1]
            # enclosed region from the adjacent triangle centroids
            a, b = cycle[0], cycle[1]
            tris = emap.get((min(a, b), max(a, b)), [])
            if len(tris) != 2:
                raise MeshTopologyError(
                    f"interface edge ({a},{b}) not shared by 2 triangles")
            cent = nodes[triangles[tris]].mean(axis=1)
            inside = points_in_polygon(cent, nodes[cycle])
            if inside[0] == inside[1]:
                raise MeshTopologyError("cannot orient interface loop region")
            reg = regions[tris[0] if inside[0] else tris[1]]
            loops.append(InterfaceLoop(nodes=np.array(cycle, dtype=np.int64),
                                       region=region_names[reg]))

    mesh = Mesh(nodes, triangles, regions, tuple(region_names),
                boundary_edges, tuple(loops))
    _validate(mesh, strict=True)
    return mesh


def _chain_edges(edges):
    """Chain undirected edges into closed cycles; error on open/branching chains."""
    adj = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    for v, nb in adj.items():
        if len(nb) != 2:
            raise MeshTopologyError(
                f"interface chain is open or branching at node {v} (degree {len(nb)})")
    seen = set()
    cycles = []
    for start in sorted(adj):
        if start in seen:
            continue
        cycle = [start]
        seen.add(start)
        prev, cur = None, start
        while True:
            nxt = [w for w in adj[cur] if w != prev]
            nxt = nxt[0] if nxt else prev
            if nxt == start:
                break
            if nxt in seen:
                raise MeshTopologyError("interface chain does not close properly")
            cycle.append(nxt)
            seen.add(nxt)
            prev, cur = cur, nxt
        if len(cycle) < 3:
            raise MeshTopologyError("interface loop has fewer than 3 nodes")
        cycles.append(np.array(cycle, dtype=np.int64))
    return cycles


def write_msh(mesh, path):
    """Write the Gmsh v2.2 ASCII subset (inverse of ``parse_msh``)."""
    region_tags = {name: 100 + i for i, name in enumerate(mesh.region_names)}
    lines = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$PhysicalNames"]
    names = [(1, 1, "boundary")]
    names += [(1, 10 + i, f"interface{i}") for i in range(len(mesh.loops))]
    names += [(2, region_tags[nm], nm) for nm in mesh.region_names]
    lines.append(str(len(names)))
    for dim, tag, nm in names:
        lines.append(f'{dim} {tag} "{nm}"')
    lines.append("$EndPhysicalNames")

    lines.append("$Nodes")
    lines.append(str(mesh.n_nodes))
    for i, (x, y) in enumerate(mesh.nodes, start=1):
        lines.append(f"{i} {x:.17g} {y:.17g} 0")
    lines.append("$EndNodes")

    lines.append("$Elements")
    elems = []
    for a, b in mesh.boundary_edges:
        elems.append((1, 1, (a + 1, b + 1)))
    for li, lp in enumerate(mesh.loops):
        for a, b in lp.segments():
            elems.append((1, 10 + li, (a + 1, b + 1)))
    for tri, reg in zip(mesh.triangles, mesh.regions):
        tag = region_tags[mesh.region_names[reg]]
        elems.append((2, tag, tuple(int(v) + 1 for v in tri)))
    lines.append(str(len(elems)))
    for ei, (etype, ptag, conn) in enumerate(elems, start=1):
        conn_s = " ".join(str(c) for c in conn)
        lines.append(f"{ei} {etype} 2 {ptag} {ptag} {conn_s}")
    lines.append("$EndElements")

    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# VTK legacy writer


def write_vtk(mesh, fields, path):
    """Write mesh and named nodal fields as legacy ASCII VTK.

    ``fields`` is a list of (name, field) pairs where each field is a
    ScalarField/VectorField or a plain array of length N_v or shape (N_v, 2).
    Region labels go to CELL_DATA; the label->index key is in the title line.
    """
    title = "regions: " + " ".join(
        f"{nm}={i}" for i, nm in enumerate(mesh.region_names))
    out = ["# vtk DataFile Version 3.0", title[:255], "ASCII",
           "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {mesh.n_nodes} double")
    for x, y in mesh.nodes:
        out.append(f"{x:.17g} {y:.17g} 0")
    nt = mesh.n_triangles
    out.append(f"CELLS {nt} {4 * nt}")
    for tri in mesh.triangles:
        out.append(f"3 {tri[0]} {tri[1]} {tri[2]}")
    out.append(f"CELL_TYPES {nt}")
    out.extend(["5"] * nt)

    if fields:
        out.append(f"POINT_DATA {mesh.n_nodes}")
        for name, fld in fields:
            vals = np.asarray(getattr(fld, "values", fld), dtype=float)
            if vals.ndim == 1:
                out.append(f"SCALARS {name} double 1")
                out.append("LOOKUP_TABLE default")
                out.extend(f"{v:.17g}" for v in vals)
            else:
                out.append(f"VECTORS {name} double")
                out.extend(f"{v[0]:.17g} {v[1]:.17g} 0" for v in vals)
    out.append(f"CELL_DATA {nt}")
    out.append("SCALARS region int 1")
    out.append("LOOKUP_TABLE default")
    out.extend(str(int(r)) for r in mesh.regions)

    with open(path, "w") as f:
        f.write("\n".join(out) + "\n")
