"""Triangulated study domains and piecewise-linear finite elements.

The mesh is a structured lattice of right triangles over the (optionally
buffered) bounding box of the study region, with the diagonal direction
alternated per cell so the triangulation has no preferred axis.  A lattice is
used instead of a constrained Delaunay mesher because the study domains here
are rectangle-embedded maps; the contract (conforming cover, bounded edge
length, minimum interior angle) is what the rest of the code relies on, so an
alternative mesher can be swapped in behind :func:`build_mesh`.

Provides:

* :func:`build_mesh` -- triangulate a polygonal hull plus guard buffer.
* :func:`assemble_fem` -- mass (consistent and lumped) and stiffness matrices.
* :func:`build_projector` -- sparse barycentric interpolation matrix from mesh
  nodes to arbitrary points.
* :class:`BlockGeometry` and GeoJSON ingestion for areal units.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    """Rejected geometric input (degenerate hull, point outside mesh, ...)."""


# minimum interior angle guaranteed by the lattice generator, degrees
MIN_ANGLE_DEG = 20.0


def as_points(points) -> np.ndarray:
    """Coerce to an (n, 2) float array and require finite coordinates."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise MeshError(f"expected points of shape (n, 2), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise MeshError("points must have finite coordinates")
    return pts


def polygon_area(ring) -> float:
    """Signed shoelace area of a closed ring (positive if counter-clockwise)."""
    r = as_points(ring)
    x, y = r[:, 0], r[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _ring_is_simple(ring: np.ndarray) -> bool:
    """Check that no two non-adjacent edges of the ring intersect."""
    n = len(ring)
    segs = [(ring[i], ring[(i + 1) % n]) for i in range(n)]

    def ccw(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    for i in range(n):
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            a, b = segs[i]
            c, d = segs[j]
            if (ccw(a, b, c) * ccw(a, b, d) < 0) and (ccw(c, d, a) * ccw(c, d, b) < 0):
                return False
    return True


@dataclass(frozen=True)
class Point2D:
    """A single planar location."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise MeshError("Point2D coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class BlockGeometry:
    """One areal unit: an outer ring plus optional holes.

    ``rings[0]`` is the outer boundary (counter-clockwise); further rings are
    holes (clockwise).  ``area`` is the net shoelace area.
    """

    id: str
    rings: tuple
    area: float = field(init=False)

    def __post_init__(self):
        rings = tuple(as_points(r) for r in self.rings)
        if not rings:
            raise MeshError(f"block {self.id!r} has no rings")
        for k, r in enumerate(rings):
            if len(r) < 3:
                raise MeshError(f"block {self.id!r} ring {k} has < 3 vertices")
            if not _ring_is_simple(r):
                raise MeshError(f"block {self.id!r} ring {k} self-intersects")
        if polygon_area(rings[0]) <= 0:
            raise MeshError(f"block {self.id!r} outer ring must be counter-clockwise")
        area = sum(polygon_area(r) for r in rings)
        if area <= 0:
            raise MeshError(f"block {self.id!r} has non-positive area")
        object.__setattr__(self, "rings", rings)
        object.__setattr__(self, "area", float(area))

    def bounds(self) -> tuple:
        outer = self.rings[0]
        return (
            outer[:, 0].min(),
            outer[:, 1].min(),
            outer[:, 0].max(),
            outer[:, 1].max(),
        )

    def contains(self, points) -> np.ndarray:
        """Even-odd (ray casting) membership test, half-open on boundaries.

        A point exactly on a shared edge belongs to exactly one of the two
        neighbouring polygons, which keeps centroid counts partition-exact.
        """
        pts = as_points(points)
        inside = np.zeros(len(pts), dtype=bool)
        for ring in self.rings:
            inside ^= _points_in_ring(pts, ring)
        return inside


def _points_in_ring(pts: np.ndarray, ring: np.ndarray) -> np.ndarray:
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    n = len(ring)
    for i in range(n):
        x1, y1 = ring[i]
        x2, y2 = ring[(i + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        if not np.any(crosses):
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xint)
    return inside


def read_blocks_geojson(path) -> list:
    """Load blocks from a GeoJSON FeatureCollection of (Multi)Polygons.

    Each feature must carry an ``id`` property.  MultiPolygons are flattened
    into one :class:`BlockGeometry` per feature with all rings combined; the
    first ring of each polygon part is treated as an outer ring.
    """
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise MeshError(f"{path}: expected a FeatureCollection")
    blocks = []
    for feat in doc["features"]:
        props = feat.get("properties") or {}
        if "id" not in props:
            raise MeshError(f"{path}: feature without an 'id' property")
        geom = feat["geometry"]
        if geom["type"] == "Polygon":
            polys = [geom["coordinates"]]
        elif geom["type"] == "MultiPolygon":
            polys = geom["coordinates"]
        else:
            raise MeshError(f"{path}: unsupported geometry {geom['type']!r}")
        rings = []
        for poly in polys:
            for k, ring in enumerate(poly):
                r = np.asarray(ring, dtype=float)
                # GeoJSON rings repeat the first vertex; drop the closure
                if np.allclose(r[0], r[-1]):
                    r = r[:-1]
                want_ccw = k == 0
                if (polygon_area(r) > 0) != want_ccw:
                    r = r[::-1]
                rings.append(r)
        blocks.append(BlockGeometry(id=str(props["id"]), rings=tuple(rings)))
    return blocks


def write_blocks_geojson(blocks, path) -> None:
    """Write blocks as a GeoJSON FeatureCollection (inverse of the reader)."""
    feats = []
    for b in blocks:
        coords = [[[float(x), float(y)] for x, y in r] + [[float(r[0, 0]), float(r[0, 1])]] for r in b.rings]
        feats.append(
            {
                "type": "Feature",
                "properties": {"id": b.id},
                "geometry": {"type": "Polygon", "coordinates": coords},
            }
        )
    with open(path, "w") as fh:
        json.dump({"type": "FeatureCollection", "features": feats}, fh)


@dataclass(frozen=True)
class TriangularMesh:
    """Conforming triangulation: vertex array, triangle index triples, boundary flags."""

    vertices: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def triangle_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def bounds(self) -> tuple:
        v = self.vertices
        return (v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max())

    def validate(self) -> None:
        areas = self.triangle_areas()
        if np.any(areas <= 0):
            raise MeshError("mesh has non-positively-oriented triangles")
        if self.n_vertices < 3:
            raise MeshError("mesh needs at least 3 vertices")

    def min_angle_deg(self) -> float:
        p = self.vertices[self.triangles]
        angles = []
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            cosang = np.sum(a * b, axis=1) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            )
            angles.append(np.degrees(np.arccos(np.clip(cosang, -1, 1))))
        return float(np.min(angles))

    def max_edge_length(self) -> float:
        p = self.vertices[self.triangles]
        lengths = [np.linalg.norm(p[:, (i + 1) % 3] - p[:, i], axis=1) for i in range(3)]
        return float(np.max(lengths))


def build_mesh(domain_hull, max_edge: float, buffer: float | None = None) -> TriangularMesh:
    """Triangulate the bounding box of ``domain_hull`` extended by ``buffer``.

    Parameters
    ----------
    domain_hull : array-like (k, 2)
        Simple polygon enclosing the study region.
    max_edge : float
        Upper bound for every triangle edge length.
    buffer : float, optional
        Outward extension of the domain, guarding against boundary effects of
        Markov field approximations.  Defaults to 0.2 x the hull diameter.

    Returns
    -------
    TriangularMesh
        Lattice of right triangles with alternating diagonals; every edge is
        <= ``max_edge`` and every interior angle is 45 degrees.
    """
    hull = as_points(domain_hull)
    if len(hull) < 3 or abs(polygon_area(hull)) < 1e-14:
        raise MeshError("domain hull is degenerate (zero area)")
    if max_edge <= 0:
        raise MeshError("max_edge must be positive")
    xmin, ymin = hull.min(axis=0)
    xmax, ymax = hull.max(axis=0)
    if buffer is None:
        buffer = 0.2 * math.hypot(xmax - xmin, ymax - ymin)
    if buffer < 0:
        raise MeshError("buffer must be non-negative")
    xmin -= buffer
    ymin -= buffer
    xmax += buffer
    ymax += buffer

    # legs of length h give hypotenuse h*sqrt(2) <= max_edge
    h = max_edge / math.sqrt(2.0)
    nx = max(1, math.ceil((xmax - xmin) / h))
    ny = max(1, math.ceil((ymax - ymin) / h))

    xs = np.linspace(xmin, xmax, nx + 1)
    ys = np.linspace(ymin, ymax, ny + 1)
    xv, yv = np.meshgrid(xs, ys)
    vertices = np.column_stack([xv.ravel(), yv.ravel()])

    def vid(ix, iy):
        return iy * (nx + 1) + ix

    triangles = []
    for iy in range(ny):
        for ix in range(nx):
            a = vid(ix, iy)
            b = vid(ix + 1, iy)
            c = vid(ix + 1, iy + 1)
            d = vid(ix, iy + 1)
            if (ix + iy) % 2 == 0:
                triangles.append((a, b, c))
                triangles.append((a, c, d))
            else:
                triangles.append((a, b, d))
                triangles.append((b, c, d))
    triangles = np.asarray(triangles, dtype=np.int64)

    onb = (
        np.isclose(vertices[:, 0], xmin)
        | np.isclose(vertices[:, 0], xmax)
        | np.isclose(vertices[:, 1], ymin)
        | np.isclose(vertices[:, 1], ymax)
    )
    mesh = TriangularMesh(vertices=vertices, triangles=triangles, boundary=onb)
    mesh.validate()
    return mesh


@dataclass(frozen=True)
class FemMatrices:
    """Linear-element mass and stiffness matrices on a triangular mesh.

    ``mass`` is the consistent mass matrix; ``mass_lumped`` the row-sum
    (diagonal) variant used wherever an easily invertible mass matrix is
    required.  ``stiffness`` is symmetric positive semi-definite with constant
    vectors in its kernel.
    """

    mass: sp.csr_matrix
    mass_lumped: np.ndarray
    stiffness: sp.csr_matrix


def assemble_fem(mesh: TriangularMesh) -> FemMatrices:
    """Assemble FEM matrices for piecewise-linear basis functions."""
    mesh.validate()
    tri = mesh.triangles
    p = mesh.vertices[tri]
    areas = mesh.triangle_areas()

    # gradient coefficients: grad(psi_i) = (b_i, c_i) / (2A), cyclic indices
    x = p[:, :, 0]
    y = p[:, :, 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)

    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()

    g_local = (
        b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]
    ) / (4.0 * areas[:, None, None])
    m_local = (np.ones((3, 3)) + np.eye(3))[None, :, :] * areas[:, None, None] / 12.0

    n = mesh.n_vertices
    G = sp.coo_matrix((g_local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    C = sp.coo_matrix((m_local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    lumped = np.asarray(C.sum(axis=1)).ravel()
    # symmetrize away assembly round-off
    G = (G + G.T) * 0.5
    C = (C + C.T) * 0.5
    return FemMatrices(mass=C.tocsr(), mass_lumped=lumped, stiffness=G.tocsr())


class _TriangleLocator:
    """Uniform bucket grid over triangle bounding boxes for point location."""

    def __init__(self, mesh: TriangularMesh):
        self.mesh = mesh
        xmin, ymin, xmax, ymax = mesh.bounds()
        n_tri = len(mesh.triangles)
        nbins = max(1, int(math.sqrt(n_tri / 2)))
        self.nbins = nbins
        self.x0, self.y0 = xmin, ymin
        self.dx = (xmax - xmin) / nbins or 1.0
        self.dy = (ymax - ymin) / nbins or 1.0
        self.buckets = [[] for _ in range(nbins * nbins)]
        pts = mesh.vertices[mesh.triangles]
        lo = pts.min(axis=1)
        hi = pts.max(axis=1)
        for t in range(n_tri):
            i0, j0 = self._bin(lo[t, 0], lo[t, 1])
            i1, j1 = self._bin(hi[t, 0], hi[t, 1])
            for j in range(j0, j1 + 1):
                for i in range(i0, i1 + 1):
                    self.buckets[j * nbins + i].append(t)

    def _bin(self, x, y):
        i = min(self.nbins - 1, max(0, int((x - self.x0) / self.dx)))
        j = min(self.nbins - 1, max(0, int((y - self.y0) / self.dy)))
        return i, j

    def locate(self, points: np.ndarray, tol: float = 1e-9):
        """Return (triangle index, barycentric coords) per point; -1 if outside."""
        mesh = self.mesh
        tri_idx = np.full(len(points), -1, dtype=np.int64)
        bary = np.zeros((len(points), 3))
        verts = mesh.vertices
        tris = mesh.triangles
        for k, (px, py) in enumerate(points):
            i, j = self._bin(px, py)
            for t in self.buckets[j * self.nbins + i]:
                ia, ib, ic = tris[t]
                ax, ay = verts[ia]
                bx, by = verts[ib]
                cx, cy = verts[ic]
                det = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
                l1 = ((px - ax) * (cy - ay) - (cx - ax) * (py - ay)) / det
                l2 = ((bx - ax) * (py - ay) - (px - ax) * (by - ay)) / det
                l0 = 1.0 - l1 - l2
                if l0 >= -tol and l1 >= -tol and l2 >= -tol:
                    lam = np.clip([l0, l1, l2], 0.0, None)
                    tri_idx[k] = t
                    bary[k] = lam / lam.sum()
                    break
        return tri_idx, bary


@dataclass(frozen=True)
class Projector:
    """Sparse barycentric interpolation matrix from mesh nodes to points.

    Each row holds the (at most three, non-negative, unit-sum) weights of one
    query point inside its containing triangle; a point coinciding with a mesh
    vertex has a single unit entry.
    """

    matrix: sp.csr_matrix
    points: np.ndarray


def build_projector(mesh: TriangularMesh, points) -> Projector:
    """Barycentric weights of ``points`` with respect to ``mesh``.

    Raises
    ------
    MeshError
        If any point lies outside the mesh hull; the message lists the
        offending point indices.
    """
    pts = as_points(points)
    locator = _TriangleLocator(mesh)
    tri_idx, bary = locator.locate(pts)
    outside = np.nonzero(tri_idx < 0)[0]
    if outside.size:
        raise MeshError(f"points outside mesh hull at indices {outside.tolist()}")

    rows, cols, vals = [], [], []
    for k in range(len(pts)):
        lam = bary[k]
        keep = lam > 1e-12
        lam = lam[keep] / lam[keep].sum()
        for v, w in zip(mesh.triangles[tri_idx[k]][keep], lam):
            rows.append(k)
            cols.append(int(v))
            vals.append(float(w))
    B = sp.csr_matrix((vals, (rows, cols)), shape=(len(pts), mesh.n_vertices))
    return Projector(matrix=B, points=pts)


def write_mesh_text(mesh: TriangularMesh, path) -> None:
    """Dump the mesh in a plain-text format for debugging and plotting.

    Format: a header line ``mesh <n_vertices> <n_triangles>``, then one
    ``v x y boundary_flag`` line per vertex, then one ``t i j k`` line per
    triangle (0-based vertex indices).
    """
    with open(path, "w") as fh:
        fh.write(f"mesh {mesh.n_vertices} {len(mesh.triangles)}\n")
        for (x, y), onb in zip(mesh.vertices, mesh.boundary):
            fh.write(f"v {x:.17g} {y:.17g} {int(onb)}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"t {i} {j} {k}\n")
