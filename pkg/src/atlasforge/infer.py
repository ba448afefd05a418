"""Inference on a trained atlas: label frequency, occupancy rate and extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from atlasforge.atlas import MinimalAtlas, ltilde_eval, occupied_from_values, phi_eval
from atlasforge.errors import DegenerateField, EmptyDomain, InvalidInput, StateError
from atlasforge.geom import TriangleMesh, sample_open_square, split_evenly

C_FLOOR = 1e-6
_CHUNK = 65536
_MAX_BATCH = 2_000_000
# standard deviations of safety margin when sizing refill batches
_REFILL_Z = 3.0


@dataclass(frozen=True)
class InferenceConfig:
    eta: float = 0.40
    tau: float = 0.5
    probe_samples: int = 5000
    grid_res: int = 64
    max_refill_rounds: int = 10

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise InvalidInput("eta must lie in (0, 1)")
        if not 0.0 < self.tau < 1.0:
            raise InvalidInput("tau must lie in (0, 1)")
        if self.grid_res < 2:
            raise InvalidInput("grid_res must be >= 2")
        if self.probe_samples < 1:
            raise InvalidInput("probe_samples must be >= 1")
        if self.max_refill_rounds < 0:
            raise InvalidInput("max_refill_rounds must be >= 0")


def _probe(atlas: MinimalAtlas, k: int, uv: np.ndarray):
    """Maximal points and classifier values of chart ``k``, evaluated in chunks."""
    pts, vals = [], []
    for s in range(0, len(uv), _CHUNK):
        p = phi_eval(atlas, k, uv[s:s + _CHUNK])
        pts.append(p)
        vals.append(ltilde_eval(atlas, k, p))
    if not pts:
        return np.zeros((0, 3)), np.zeros(0)
    return np.concatenate(pts), np.concatenate(vals)


def _require_c(atlas: MinimalAtlas) -> float:
    if atlas.label_frequency is None:
        raise StateError("label frequency is not set")
    return atlas.label_frequency


def label_frequency_from_values(values, eta: float) -> float:
    """Median of the top ``ceil(eta * M)`` classifier values, clamped to ``(1e-6, 1]``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if len(v) == 0:
        raise InvalidInput("no classifier values to estimate the label frequency from")
    if np.all(v <= C_FLOOR):
        raise DegenerateField("classifier is numerically zero on every probe point")
    top = np.sort(v)[len(v) - math.ceil(eta * len(v)):]
    return float(min(max(np.median(top), C_FLOOR), 1.0))


def estimate_label_frequency(atlas: MinimalAtlas, cfg: InferenceConfig,
                             rng: np.random.Generator) -> float:
    """Estimate ``c`` from probe samples pooled over all charts."""
    values = []
    for k, n in enumerate(split_evenly(cfg.probe_samples, atlas.n_charts)):
        values.append(_probe(atlas, k, sample_open_square(n, rng))[1])
    return label_frequency_from_values(np.concatenate(values), cfg.eta)


def _draw_occupied(atlas: MinimalAtlas, n: int, rng: np.random.Generator):
    """Draw ``n`` UV samples split over the charts and keep the occupied ones."""
    c = _require_c(atlas)
    charts, uvs, pts = [], [], []
    for k, m in enumerate(split_evenly(n, atlas.n_charts)):
        uv = sample_open_square(m, rng)
        p, vals = _probe(atlas, k, uv)
        keep = occupied_from_values(vals, c, atlas.tau)
        charts.append(np.full(int(keep.sum()), k, dtype=np.int64))
        uvs.append(uv[keep])
        pts.append(p[keep])
    return np.concatenate(charts), np.concatenate(uvs), np.concatenate(pts)


def estimate_occupancy_rate(atlas: MinimalAtlas, n_probe: int, rng: np.random.Generator) -> float:
    """Fraction of probe UVs, pooled over charts, that are occupied."""
    if n_probe < 1:
        raise InvalidInput("n_probe must be >= 1")
    chart, _, _ = _draw_occupied(atlas, n_probe, rng)
    return len(chart) / n_probe


@dataclass(frozen=True)
class Extraction:
    points: np.ndarray
    chart: np.ndarray
    uv: np.ndarray
    occupancy_rate: float
    rounds: int
    drawn: int


def refill_size(need: int, kept: int, drawn: int, z: float = _REFILL_Z) -> int:
    """UV draws expected to yield ``need`` more occupied samples with high probability.

    The rate is taken at a lower confidence bound of the running estimate and
    the batch is grown until ``need`` sits ``z`` binomial deviations below its
    mean yield.
    """
    rate = kept / drawn
    lo = rate - z * math.sqrt(rate * (1.0 - rate) / drawn)
    r = max(lo if lo > 0.0 else rate, C_FLOOR)
    s = math.sqrt(r * (1.0 - r))
    root = (z * s + math.sqrt(z * z * s * s + 4.0 * r * need)) / (2.0 * r)
    return min(max(math.ceil(root * root), need), _MAX_BATCH)


def extract_point_cloud(atlas: MinimalAtlas, n: int, cfg: InferenceConfig,
                        rng: np.random.Generator) -> Extraction:
    """Exactly ``n`` surface points by two-step batch rejection sampling.

    A first batch of ``ceil(2n/3)`` UVs estimates the occupancy rate; later
    batches are sized from the running estimate, with a safety margin, to
    cover the remainder. The pooled result is uniformly subsampled to ``n``.
    """
    _require_c(atlas)
    if n < 1:
        raise InvalidInput("target size must be >= 1")
    first = math.ceil(2 * n / 3)
    parts = [_draw_occupied(atlas, first, rng)]
    drawn = first
    kept = len(parts[0][0])
    rounds = 0
    while kept < n and rounds < cfg.max_refill_rounds:
        if kept == 0:
            batch = first
        else:
            batch = refill_size(n - kept, kept, drawn)
        parts.append(_draw_occupied(atlas, batch, rng))
        drawn += batch
        kept += len(parts[-1][0])
        rounds += 1
    if kept == 0:
        raise EmptyDomain("no occupied UV sample found; the reconstructed domain is empty")
    if kept < n:
        raise EmptyDomain(f"only {kept} of {n} points after {rounds} refill rounds")
    chart = np.concatenate([p[0] for p in parts])
    uv = np.concatenate([p[1] for p in parts])
    pts = np.concatenate([p[2] for p in parts])
    if kept > n:
        pick = np.sort(rng.choice(kept, size=n, replace=False))
        chart, uv, pts = chart[pick], uv[pick], pts[pick]
    return Extraction(pts, chart, uv, kept / drawn, rounds, drawn)


def lattice(grid_res: int) -> np.ndarray:
    """Cell-center coordinates of a regular ``grid_res`` subdivision of (-1, 1)."""
    return -1.0 + (2.0 * np.arange(grid_res) + 1.0) / grid_res


def _grid_triangles(g: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(g - 1), np.arange(g - 1), indexing="ij")
    a = (i * g + j).ravel()
    b = a + g
    c = b + 1
    d = a + 1
    return np.concatenate([np.stack([a, b, c], axis=1), np.stack([a, c, d], axis=1)])


def extract_mesh(atlas: MinimalAtlas, grid_res: int) -> TriangleMesh:
    """Trimmed UV-grid mesh: keep triangles whose three vertices are occupied.

    Charts are concatenated without welding; unreferenced vertices are dropped.
    """
    c = _require_c(atlas)
    if grid_res < 2:
        raise InvalidInput("grid_res must be >= 2")
    axis = lattice(grid_res)
    uu, vv = np.meshgrid(axis, axis, indexing="ij")
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    tris = _grid_triangles(grid_res)
    verts, faces, ids = [], [], []
    offset = 0
    for k in range(atlas.n_charts):
        pts, vals = _probe(atlas, k, uv)
        occ = occupied_from_values(vals, c, atlas.tau)
        keep = tris[occ[tris].all(axis=1)]
        if len(keep) == 0:
            continue
        used = np.unique(keep)
        remap = np.full(len(uv), -1, dtype=np.int64)
        remap[used] = np.arange(len(used)) + offset
        verts.append(pts[used])
        faces.append(remap[keep])
        ids.append(np.full(len(used), k, dtype=np.int64))
        offset += len(used)
    if not faces:
        raise EmptyDomain("no triangle has all three vertices occupied")
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(ids))
