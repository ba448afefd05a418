"""Reconstruction accuracy and parameterization distortion metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from atlasforge.atlas import MinimalAtlas
from atlasforge.errors import InvalidInput
from atlasforge.geom import as_cloud, sample_mesh_uniform
from atlasforge.infer import (
    InferenceConfig,
    estimate_occupancy_rate,
    extract_mesh,
    extract_point_cloud,
)
from atlasforge.losses import DEFAULT_EPS, metric_terms
from atlasforge.neighbor import build_index
from atlasforge.nn import mlp_forward

FSCORE_DELTA = 0.01


def _directed_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distance from every point of ``a`` to its nearest point in ``b``."""
    return build_index(b).query(a)[1]


def chamfer_bidirectional(a, b) -> float:
    """Sum of the two directed mean squared nearest-neighbour distances."""
    a = as_cloud(a)
    b = as_cloud(b)
    return float(_directed_sq(a, b).mean() + _directed_sq(b, a).mean())


def fscore(a, b, delta: float = FSCORE_DELTA) -> float:
    """F-score in percent at Euclidean distance threshold ``delta``.

    Precision counts points of ``a`` within ``delta`` of ``b``, recall the
    converse.
    """
    if not delta > 0:
        raise InvalidInput("delta must be positive")
    a = as_cloud(a)
    b = as_cloud(b)
    d2 = delta * delta
    precision = 100.0 * float((_directed_sq(a, b) < d2).mean())
    recall = 100.0 * float((_directed_sq(b, a) < d2).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def distortion_metrics(jacs, eps: float = DEFAULT_EPS) -> tuple[float, float, float]:
    """Metric, conformal and area distortion over a set of 3x2 Jacobians.

    Each is offset so that zero means no distortion (up to a global scale for
    the metric and area terms):

    * metric: ``2 sqrt(mean tr g * mean tr g^-1) - 4``
    * conformal (MIPS): ``mean tr g / sqrt(det g) - 2``
    * area: ``2 sqrt(mean sqrt(det g) * mean 1/sqrt(det g)) - 2``

    ``g`` is the conditioned metric tensor ``J^T J + eps I``.
    """
    j = np.asarray(jacs, dtype=np.float64).reshape(-1, 3, 2)
    if len(j) == 0:
        raise InvalidInput("no samples to measure distortion on")
    a, b, c = metric_terms(j, eps)
    det = a * c - b * b
    if np.any(det <= 0.0):
        raise InvalidInput("singular metric tensor; use eps > 0")
    tr = a + c
    root = np.sqrt(det)
    metric = 2.0 * np.sqrt(tr.mean() * (tr / det).mean()) - 4.0
    conformal = (tr / root).mean() - 2.0
    area = 2.0 * np.sqrt(root.mean() * (1.0 / root).mean()) - 2.0
    return float(metric), float(conformal), float(area)


def chart_jacobians(atlas: MinimalAtlas, chart: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Parameterization Jacobians at ``uv``, in input order."""
    out = np.zeros((len(uv), 3, 2))
    for k in range(atlas.n_charts):
        sel = np.flatnonzero(chart == k)
        if len(sel):
            out[sel] = mlp_forward(atlas.charts[k].phi, uv[sel], with_jacobian=True)[1]
    return out


@dataclass(frozen=True)
class EvalReport:
    pc_cd: float
    pc_f: float
    mesh_cd: float
    mesh_f: float
    distortion_metric: float
    distortion_conformal: float
    distortion_area: float
    occupancy_rate: float
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        return (f"pc_cd={self.pc_cd:.4e} pc_f={self.pc_f:.2f} mesh_cd={self.mesh_cd:.4e} "
                f"mesh_f={self.mesh_f:.2f} dist(metric/conformal/area)="
                f"{self.distortion_metric:.4f}/{self.distortion_conformal:.4f}/"
                f"{self.distortion_area:.4f} occupancy={self.occupancy_rate:.4f}")


def evaluate(atlas: MinimalAtlas, target, rng: np.random.Generator, size: int = 2500,
             cfg: InferenceConfig | None = None, delta: float = FSCORE_DELTA,
             eps: float = DEFAULT_EPS) -> EvalReport:
    """Extract a point cloud and a mesh from ``atlas`` and score them against ``target``."""
    cfg = InferenceConfig() if cfg is None else cfg
    tgt = as_cloud(target)
    ext = extract_point_cloud(atlas, size, cfg, rng)
    mesh = extract_mesh(atlas, cfg.grid_res)
    mesh_pts = sample_mesh_uniform(mesh, size, rng)
    dist = distortion_metrics(chart_jacobians(atlas, ext.chart, ext.uv), eps)
    rate = estimate_occupancy_rate(atlas, cfg.probe_samples, rng)
    meta = {
        "cd_convention": "sum of both directed mean squared distances",
        "fscore_delta": delta,
        "fscore_reference": "absolute distance in unit-ball normalized coordinates",
        "eval_size": size,
        "grid_res": cfg.grid_res,
        "eps": eps,
        "label_frequency": atlas.label_frequency,
        "tau": atlas.tau,
    }
    return EvalReport(
        pc_cd=chamfer_bidirectional(ext.points, tgt),
        pc_f=fscore(ext.points, tgt, delta),
        mesh_cd=chamfer_bidirectional(mesh_pts, tgt),
        mesh_f=fscore(mesh_pts, tgt, delta),
        distortion_metric=dist[0],
        distortion_conformal=dist[1],
        distortion_area=dist[2],
        occupancy_rate=rate,
        metadata=meta,
    )
