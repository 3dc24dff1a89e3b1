"""Block-level aggregation of gridded field values.

Two aggregation rules are supported for turning per-cell predictions into one
value per areal block:

* overlap-weighted mean: every grid cell intersecting the block contributes
  with weight equal to the fraction of the block's area it covers (method 1);
* simple mean over the cells whose centroids fall inside the block (method 2).

Overlap fractions come from exact Sutherland-Hodgman clipping of the block
polygons against the axis-aligned cells, which is deterministic and cheap at
the grid sizes used here.  Centroid membership ties on block boundaries are
resolved by the half-open ray-casting rule, so each centroid belongs to
exactly one block of a partition.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .mesh import BlockGeometry, polygon_area


class AggregationError(ValueError):
    """Aggregation contract violation (block outside grid, empty block, ...)."""


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned regular grid of nx * ny cells.

    Cell (ix, iy) covers [x0 + ix dx, x0 + (ix+1) dx] x [y0 + iy dy, ...] and
    has flat index iy * nx + ix; centroids follow the same ordering.
    """

    x0: float
    y0: float
    dx: float
    dy: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.dx <= 0 or self.dy <= 0:
            raise AggregationError("cell sizes must be positive")
        if self.nx < 1 or self.ny < 1:
            raise AggregationError("grid must have at least one cell")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def centroids(self) -> np.ndarray:
        xs = self.x0 + (np.arange(self.nx) + 0.5) * self.dx
        ys = self.y0 + (np.arange(self.ny) + 0.5) * self.dy
        xv, yv = np.meshgrid(xs, ys)
        return np.column_stack([xv.ravel(), yv.ravel()])

    def cell_bounds(self, index: int) -> tuple:
        iy, ix = divmod(index, self.nx)
        x = self.x0 + ix * self.dx
        y = self.y0 + iy * self.dy
        return (x, y, x + self.dx, y + self.dy)

    def bounds(self) -> tuple:
        return (
            self.x0,
            self.y0,
            self.x0 + self.nx * self.dx,
            self.y0 + self.ny * self.dy,
        )


def _clip_ring_to_box(ring: np.ndarray, xmin, ymin, xmax, ymax) -> np.ndarray:
    """Sutherland-Hodgman clip of a ring against an axis-aligned rectangle."""
    def clip_edge(poly, inside, intersect):
        out = []
        n = len(poly)
        for i in range(n):
            cur = poly[i]
            prev = poly[i - 1]
            cur_in = inside(cur)
            prev_in = inside(prev)
            if cur_in:
                if not prev_in:
                    out.append(intersect(prev, cur))
                out.append(cur)
            elif prev_in:
                out.append(intersect(prev, cur))
        return out

    def x_cross(a, b, x):
        t = (x - a[0]) / (b[0] - a[0])
        return (x, a[1] + t * (b[1] - a[1]))

    def y_cross(a, b, y):
        t = (y - a[1]) / (b[1] - a[1])
        return (a[0] + t * (b[0] - a[0]), y)

    poly = [tuple(p) for p in ring]
    poly = clip_edge(poly, lambda p: p[0] >= xmin, lambda a, b: x_cross(a, b, xmin))
    if poly:
        poly = clip_edge(poly, lambda p: p[0] <= xmax, lambda a, b: x_cross(a, b, xmax))
    if poly:
        poly = clip_edge(poly, lambda p: p[1] >= ymin, lambda a, b: y_cross(a, b, ymin))
    if poly:
        poly = clip_edge(poly, lambda p: p[1] <= ymax, lambda a, b: y_cross(a, b, ymax))
    return np.asarray(poly) if poly else np.empty((0, 2))


@dataclass(frozen=True)
class OverlapTable:
    """Per block: cell indices and the fraction h of the block's area in each.

    Fractions are strictly positive and sum to one per block when the block is
    fully inside the grid.
    """

    block_ids: tuple
    entries: tuple  # per block: (cell_index array, h array)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["block_id", "cell_index", "h"])
            for bid, (cells, h) in zip(self.block_ids, self.entries):
                for c, frac in zip(cells, h):
                    writer.writerow([bid, int(c), f"{frac:.12g}"])


def compute_overlaps(blocks, grid: GridSpec) -> OverlapTable:
    """Exact block/cell overlap fractions via polygon clipping.

    Raises
    ------
    AggregationError
        If a block extends beyond the grid, naming the block.
    """
    gx0, gy0, gx1, gy1 = grid.bounds()
    block_ids = []
    entries = []
    for block in blocks:
        bx0, by0, bx1, by1 = block.bounds()
        tol = 1e-9 * max(grid.dx, grid.dy)
        if bx0 < gx0 - tol or by0 < gy0 - tol or bx1 > gx1 + tol or by1 > gy1 + tol:
            raise AggregationError(f"block {block.id!r} extends outside the grid")
        ix0 = max(0, int(np.floor((bx0 - grid.x0) / grid.dx)))
        ix1 = min(grid.nx - 1, int(np.ceil((bx1 - grid.x0) / grid.dx)) - 1)
        iy0 = max(0, int(np.floor((by0 - grid.y0) / grid.dy)))
        iy1 = min(grid.ny - 1, int(np.ceil((by1 - grid.y0) / grid.dy)) - 1)
        cells = []
        fracs = []
        for iy in range(iy0, iy1 + 1):
            for ix in range(ix0, ix1 + 1):
                index = iy * grid.nx + ix
                xmin, ymin, xmax, ymax = grid.cell_bounds(index)
                area = 0.0
                for ring in block.rings:
                    clipped = _clip_ring_to_box(ring, xmin, ymin, xmax, ymax)
                    if len(clipped) >= 3:
                        area += polygon_area(clipped)
                if area > 1e-12 * block.area:
                    cells.append(index)
                    fracs.append(area / block.area)
        block_ids.append(block.id)
        entries.append((np.asarray(cells, dtype=np.int64), np.asarray(fracs)))
    return OverlapTable(block_ids=tuple(block_ids), entries=tuple(entries))


def method1(values, table: OverlapTable) -> np.ndarray:
    """Overlap-weighted mean of grid values per block."""
    v = np.asarray(values, dtype=float)
    return np.array([float(v[cells] @ h) for cells, h in table.entries])


def centroid_members(blocks, grid: GridSpec) -> list:
    """Indices of grid cells whose centroids lie inside each block."""
    cents = grid.centroids()
    members = []
    for block in blocks:
        bx0, by0, bx1, by1 = block.bounds()
        candidate = np.nonzero(
            (cents[:, 0] >= bx0 - grid.dx)
            & (cents[:, 0] <= bx1 + grid.dx)
            & (cents[:, 1] >= by0 - grid.dy)
            & (cents[:, 1] <= by1 + grid.dy)
        )[0]
        inside = candidate[block.contains(cents[candidate])]
        members.append(inside)
    return members


def method2(values, blocks, grid: GridSpec, members=None) -> np.ndarray:
    """Simple mean over interior-centroid cells per block.

    Raises
    ------
    AggregationError
        If any block contains no cell centroid; the message lists the ids so
        the failure surfaces instead of being silently imputed.
    """
    v = np.asarray(values, dtype=float)
    if members is None:
        members = centroid_members(blocks, grid)
    empty = [b.id for b, m in zip(blocks, members) if len(m) == 0]
    if empty:
        raise AggregationError(f"blocks without interior centroids: {empty}")
    return np.array([float(v[m].mean()) for m in members])
