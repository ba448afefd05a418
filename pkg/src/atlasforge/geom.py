"""Geometric value types, sampling, normalization and synthetic surfaces.

Point clouds are plain ``(N, 3)`` float64 arrays throughout the package;
:func:`as_cloud` is the single validation gate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from atlasforge.errors import DegenerateInput, InvalidInput

SURFACE_KINDS = ("sphere", "torus", "disk", "two_spheres", "open_cylinder")

# Parameters of the synthetic fixtures, before unit-ball normalization.
SURFACE_DEFAULTS = {
    "sphere": {"radius": 1.0},
    "torus": {"major": 1.0, "minor": 0.3},
    "disk": {"radius": 1.0},
    "two_spheres": {"radius": 1.0, "separation": 3.0},
    "open_cylinder": {"radius": 1.0, "height": 2.0},
}


def as_cloud(points, allow_empty: bool = False) -> np.ndarray:
    """Validate and return ``points`` as a contiguous ``(N, 3)`` float64 array."""
    arr = np.ascontiguousarray(points, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInput(f"expected an (N, 3) point array, got shape {arr.shape}")
    if not allow_empty and len(arr) == 0:
        raise InvalidInput("point cloud is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("point cloud has non-finite coordinates")
    return arr


@dataclass(frozen=True)
class Normalization:
    """Affine map ``x -> (x - center) / scale`` taking a cloud into the unit ball."""

    center: np.ndarray
    scale: float
    convention: str = "centroid/max-distance"

    def apply(self, points) -> np.ndarray:
        return (as_cloud(points, allow_empty=True) - self.center) / self.scale

    def invert(self, points) -> np.ndarray:
        return as_cloud(points, allow_empty=True) * self.scale + self.center

    def to_dict(self) -> dict:
        return {
            "center": [float(c) for c in self.center],
            "scale": float(self.scale),
            "convention": self.convention,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(np.asarray(d["center"], dtype=np.float64), float(d["scale"]),
                   d.get("convention", "centroid/max-distance"))

    @classmethod
    def identity(cls) -> "Normalization":
        return cls(np.zeros(3), 1.0)


def normalize_unit_ball(cloud) -> tuple[np.ndarray, np.ndarray, float]:
    """Center a cloud at its centroid and scale its farthest point to norm 1.

    Returns
    -------
    normalized : (N, 3) array
    center : (3,) array
        Centroid of the input.
    scale : float
        Largest distance from the centroid; divide by it to normalize.
    """
    pts = as_cloud(cloud)
    center = pts.mean(axis=0)
    shifted = pts - center
    scale = float(np.sqrt((shifted**2).sum(axis=1).max()))
    if not scale > 0.0:
        raise DegenerateInput("all points are identical; unit-ball scale is zero")
    return shifted / scale, center, scale


def normalization_of(cloud) -> Normalization:
    _, center, scale = normalize_unit_ball(cloud)
    return Normalization(center, scale)


@dataclass(frozen=True)
class UVBatch:
    """Per-chart UV samples strictly inside the open square ``(-1, 1)^2``.

    ``labels`` marks membership in the nearest-neighbour set of each chart and
    ``occupied`` the inferred occupancy; either may be ``None``.
    """

    uvs: list[np.ndarray]
    labels: list[np.ndarray] | None = None
    occupied: list[np.ndarray] | None = None

    def __post_init__(self):
        for u in self.uvs:
            check_open_square(u)
        for flags in (self.labels, self.occupied):
            if flags is None:
                continue
            if len(flags) != len(self.uvs):
                raise InvalidInput("flag list length differs from chart count")
            for u, f in zip(self.uvs, flags):
                if len(f) != len(u):
                    raise InvalidInput("flag array length differs from sample count")

    @property
    def n_charts(self) -> int:
        return len(self.uvs)

    @property
    def sizes(self) -> list[int]:
        return [len(u) for u in self.uvs]

    def __len__(self) -> int:
        return sum(self.sizes)


def check_open_square(uv) -> np.ndarray:
    arr = np.asarray(uv, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInput(f"expected (N, 2) UV samples, got shape {arr.shape}")
    if not np.all(np.abs(arr) < 1.0):
        raise InvalidInput("UV samples must lie strictly inside (-1, 1)^2")
    return arr


def sample_open_square(n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` i.i.d. uniform samples from the open square ``(-1, 1)^2``."""
    if n < 0:
        raise InvalidInput("sample count must be non-negative")
    # uniform() is half-open [-1, 1); the closed end is rejected and redrawn
    out = rng.uniform(-1.0, 1.0, size=(n, 2))
    bad = out[:, 0] == -1.0
    bad |= out[:, 1] == -1.0
    while np.any(bad):
        out[bad] = rng.uniform(-1.0, 1.0, size=(int(bad.sum()), 2))
        bad = (out[:, 0] == -1.0) | (out[:, 1] == -1.0)
    return out


def split_evenly(total: int, parts: int) -> list[int]:
    """Split ``total`` into ``parts`` counts differing by at most one."""
    base, extra = divmod(total, parts)
    return [base + (1 if k < extra else 0) for k in range(parts)]


def sample_uv_batch(total: int, n_charts: int, rng: np.random.Generator) -> UVBatch:
    return UVBatch([sample_open_square(n, rng) for n in split_evenly(total, n_charts)])


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    chart_id: np.ndarray = field(default=None)

    def __post_init__(self):
        v = as_cloud(self.vertices, allow_empty=True)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise InvalidInput("triangle index out of range")
        if len(t) and np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise InvalidInput("triangle with repeated vertex index")
        cid = self.chart_id
        cid = np.zeros(len(v), dtype=np.int64) if cid is None else np.asarray(cid, dtype=np.int64)
        if len(cid) != len(v):
            raise InvalidInput("chart_id length differs from vertex count")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "chart_id", cid)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edge_lengths(self) -> np.ndarray:
        """Lengths of the three edges of every triangle, shape ``(T, 3)``."""
        p = self.vertices[self.triangles]
        return np.linalg.norm(p - np.roll(p, 1, axis=1), axis=2)


def sample_mesh_uniform(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform sample of ``n`` points on ``mesh``."""
    areas = mesh.triangle_areas() if len(mesh.triangles) else np.zeros(0)
    total = areas.sum()
    if not total > 0.0:
        raise DegenerateInput("mesh has zero total area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    w = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    return w[:, :1] * a + w[:, 1:2] * b + w[:, 2:] * c


def _sphere(n, radius, rng):
    x = rng.normal(size=(n, 3))
    return radius * x / np.linalg.norm(x, axis=1, keepdims=True)


def _torus(n, major, minor, rng):
    # tube angle density is proportional to the local circumference R + r cos(t)
    out = np.empty(0)
    while out.size < n:
        t = rng.uniform(0.0, 2.0 * np.pi, size=2 * n)
        keep = rng.uniform(size=2 * n) * (major + minor) < major + minor * np.cos(t)
        out = np.concatenate([out, t[keep]])
    t = out[:n]
    p = rng.uniform(0.0, 2.0 * np.pi, size=n)
    ring = major + minor * np.cos(t)
    return np.stack([ring * np.cos(p), ring * np.sin(p), minor * np.sin(t)], axis=1)


def _disk(n, radius, rng):
    r = radius * np.sqrt(rng.uniform(size=n))
    t = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return np.stack([r * np.cos(t), r * np.sin(t), np.zeros(n)], axis=1)


def _two_spheres(n, radius, separation, rng):
    if separation <= 2.0 * radius:
        raise InvalidInput("two_spheres needs separation > 2 * radius")
    pts = _sphere(n, radius, rng)
    side = np.where(np.arange(n) % 2 == 0, -0.5, 0.5) * separation
    pts[:, 0] += side
    return pts


def _open_cylinder(n, radius, height, rng):
    t = rng.uniform(0.0, 2.0 * np.pi, size=n)
    z = rng.uniform(-0.5 * height, 0.5 * height, size=n)
    return np.stack([radius * np.cos(t), radius * np.sin(t), z], axis=1)


def synth_surface(kind: str, n: int, rng: np.random.Generator, **params) -> np.ndarray:
    """Area-uniform samples of an analytic test surface, scaled into the unit ball.

    Normalization uses the surface's own center and bounding radius rather
    than sample statistics, so a sphere lands exactly on the unit sphere and
    results do not depend on sampling noise. ``params`` override
    :data:`SURFACE_DEFAULTS`; unknown names are rejected.
    """
    if kind not in SURFACE_DEFAULTS:
        raise InvalidInput(f"unknown surface kind {kind!r}; choose from {SURFACE_KINDS}")
    if n < 1:
        raise InvalidInput("need at least one sample")
    unknown = set(params) - set(SURFACE_DEFAULTS[kind])
    if unknown:
        raise InvalidInput(f"unknown parameters for {kind}: {sorted(unknown)}")
    p = {**SURFACE_DEFAULTS[kind], **params}
    if any(not (float(v) > 0.0) for v in p.values()):
        raise InvalidInput(f"surface parameters must be positive: {p}")
    if kind == "sphere":
        pts, bound = _sphere(n, p["radius"], rng), p["radius"]
    elif kind == "torus":
        if p["minor"] >= p["major"]:
            raise InvalidInput("torus needs minor < major")
        pts, bound = _torus(n, p["major"], p["minor"], rng), p["major"] + p["minor"]
    elif kind == "disk":
        pts, bound = _disk(n, p["radius"], rng), p["radius"]
    elif kind == "two_spheres":
        pts = _two_spheres(n, p["radius"], p["separation"], rng)
        bound = 0.5 * p["separation"] + p["radius"]
    else:
        pts = _open_cylinder(n, p["radius"], p["height"], rng)
        bound = float(np.hypot(p["radius"], 0.5 * p["height"]))
    return pts / bound


def mesh_connected_components(mesh: TriangleMesh, weld_tol: float | str | None = None) -> int:
    """Count connected components of the triangle-adjacency graph.

    Triangles sharing a vertex index are connected. With ``weld_tol`` set,
    vertices closer than ``weld_tol`` are additionally treated as shared, which
    joins patches of different charts that are not stitched index-wise.
    ``weld_tol="edge"`` uses the mesh's longest edge: gaps no wider than the
    mesh's own resolution do not separate components.
    """
    tris = mesh.triangles
    if len(tris) == 0:
        return 0
    if isinstance(weld_tol, str):
        if weld_tol != "edge":
            raise InvalidInput(f"unknown weld tolerance {weld_tol!r}")
        weld_tol = float(mesh.edge_lengths().max())
    nv = len(mesh.vertices)
    rows = [tris[:, 0], tris[:, 1], tris[:, 2]]
    cols = [tris[:, 1], tris[:, 2], tris[:, 0]]
    used = np.unique(tris)
    if weld_tol is not None and weld_tol > 0:
        pairs = cKDTree(mesh.vertices[used]).query_pairs(weld_tol, output_type="ndarray")
        if len(pairs):
            rows.append(used[pairs[:, 0]])
            cols.append(used[pairs[:, 1]])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    graph = coo_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(nv, nv))
    _, labels = connected_components(graph, directed=False)
    return int(len(np.unique(labels[used])))
