"""Exact nearest-neighbour queries on a uniform grid.

Queries visit grid cells ring by ring (Chebyshev shells around the query's
cell) and stop once no unvisited cell can hold a strictly closer point, so
results are identical to a brute-force scan, ties included: the lowest
reference index wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from atlasforge.errors import InvalidInput
from atlasforge.geom import as_cloud

# Keeps memory bounded when a caller asks for a cell size far below the point spacing.
_MAX_CELLS_PER_POINT = 8


@dataclass(frozen=True)
class NnIndex:
    points: np.ndarray
    origin: np.ndarray
    cell_size: float
    dims: np.ndarray
    cell_start: np.ndarray
    cell_items: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest reference index and squared distance for each query row."""
        q = as_cloud(queries, allow_empty=True)
        if len(q) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        return _query_many(self.points, self.origin, self.cell_size, self.dims,
                           self.cell_start, self.cell_items, q)


def build_index(reference, cell_size: float | None = None) -> NnIndex:
    """Bucket ``reference`` points into a uniform grid.

    ``cell_size=None`` picks bounding-box diagonal / cbrt(N). A requested size
    that would create more than a few cells per point is enlarged; the
    effective value is stored on the index.
    """
    pts = as_cloud(reference)
    if cell_size is not None and not cell_size > 0:
        raise InvalidInput("cell_size must be positive")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = hi - lo
    n = len(pts)
    if cell_size is None:
        diag = float(np.linalg.norm(extent))
        cell_size = diag / n ** (1.0 / 3.0) if diag > 0 else 1.0
    h = float(cell_size)
    budget = _MAX_CELLS_PER_POINT * n + 64
    while True:
        dims = np.maximum(np.floor(extent / h).astype(np.int64) + 1, 1)
        if int(np.prod(dims)) <= budget:
            break
        h *= 1.5
    cells = _cell_ids(pts, lo, h, dims)
    order = np.argsort(cells, kind="stable")
    counts = np.bincount(cells, minlength=int(np.prod(dims)))
    start = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    return NnIndex(pts, lo.copy(), h, dims, start, order.astype(np.int64))


def _cell_ids(pts, origin, h, dims):
    c = np.floor((pts - origin) / h).astype(np.int64)
    c = np.clip(c, 0, dims - 1)
    return (c[:, 0] * dims[1] + c[:, 1]) * dims[2] + c[:, 2]


def nearest(index: NnIndex, query) -> tuple[int, float]:
    idx, d2 = index.query(np.asarray(query, dtype=np.float64).reshape(1, 3))
    return int(idx[0]), float(d2[0])


def nearest_many(index: NnIndex, queries) -> tuple[np.ndarray, np.ndarray]:
    return index.query(queries)


@numba.njit(cache=True)
def _query_many(points, origin, h, dims, cell_start, cell_items, queries):
    nq = queries.shape[0]
    out_idx = np.empty(nq, dtype=np.int64)
    out_d2 = np.empty(nq, dtype=np.float64)
    nx, ny, nz = dims[0], dims[1], dims[2]
    slack = 1e-9 * h
    for qi in range(nq):
        qx, qy, qz = queries[qi, 0], queries[qi, 1], queries[qi, 2]
        cx = min(max(int(math.floor((qx - origin[0]) / h)), 0), nx - 1)
        cy = min(max(int(math.floor((qy - origin[1]) / h)), 0), ny - 1)
        cz = min(max(int(math.floor((qz - origin[2]) / h)), 0), nz - 1)
        best = -1
        best_d2 = np.inf
        r = 0
        while True:
            x0, x1 = max(cx - r, 0), min(cx + r, nx - 1)
            y0, y1 = max(cy - r, 0), min(cy + r, ny - 1)
            z0, z1 = max(cz - r, 0), min(cz + r, nz - 1)
            for ix in range(x0, x1 + 1):
                dx_ring = abs(ix - cx)
                for iy in range(y0, y1 + 1):
                    dxy_ring = max(dx_ring, abs(iy - cy))
                    for iz in range(z0, z1 + 1):
                        if max(dxy_ring, abs(iz - cz)) != r:
                            continue
                        cell = (ix * ny + iy) * nz + iz
                        for s in range(cell_start[cell], cell_start[cell + 1]):
                            j = cell_items[s]
                            dx = qx - points[j, 0]
                            dy = qy - points[j, 1]
                            dz = qz - points[j, 2]
                            d2 = dx * dx + dy * dy + dz * dz
                            if d2 < best_d2 or (d2 == best_d2 and j < best):
                                best_d2 = d2
                                best = j
            # distance from the query to the nearest unvisited cell face
            lb = np.inf
            if x0 > 0:
                lb = min(lb, qx - (origin[0] + x0 * h))
            if x1 < nx - 1:
                lb = min(lb, origin[0] + (x1 + 1) * h - qx)
            if y0 > 0:
                lb = min(lb, qy - (origin[1] + y0 * h))
            if y1 < ny - 1:
                lb = min(lb, origin[1] + (y1 + 1) * h - qy)
            if z0 > 0:
                lb = min(lb, qz - (origin[2] + z0 * h))
            if z1 < nz - 1:
                lb = min(lb, origin[2] + (z1 + 1) * h - qz)
            if lb == np.inf:
                break
            lb = max(lb - slack, 0.0)
            if best >= 0 and best_d2 < lb * lb:
                break
            r += 1
        out_idx[qi] = best
        out_d2[qi] = best_d2
    return out_idx, out_d2
