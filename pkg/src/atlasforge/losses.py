"""Training losses and their gradient flow.

Three terms are combined: the unidirectional Chamfer reconstruction loss, the
PU occupancy loss (binary cross-entropy on nearest-neighbour labels, with the
parameterization held constant), and the metric distortion loss (the
epsilon-conditioned scaled symmetric Dirichlet energy at its optimal scale).
Nearest-neighbour assignments are piecewise constant and carry no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from atlasforge.errors import InvalidInput, NumericalError
from atlasforge.geom import UVBatch, as_cloud
from atlasforge.neighbor import build_index
from atlasforge.nn import mlp_backward_params, mlp_forward, positional_encode

DEFAULT_EPS = 1e-4
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    rec: float = 1.0
    occ: float = 1.0
    dist: float = 1e-5

    def __post_init__(self):
        for name in ("rec", "occ", "dist"):
            w = getattr(self, name)
            if not (np.isfinite(w) and w >= 0):
                raise InvalidInput(f"loss weight {name} must be finite and non-negative")


@dataclass(frozen=True)
class Labeling:
    """Nearest maximal point of every target point, plus per-chart label flags."""

    labels: list[np.ndarray]
    chart: np.ndarray
    sample: np.ndarray
    sq_dist: np.ndarray

    @property
    def n_labeled(self) -> int:
        return int(sum(int(l.sum()) for l in self.labels))


def label_nearest(target, maximal: list[np.ndarray]) -> Labeling:
    """Assign each target point to its globally nearest maximal point.

    Charts are searched jointly; ties go to the lower chart, then lower sample.
    A sample is labeled positive when at least one target point selects it.
    """
    tgt = as_cloud(target, allow_empty=True)
    sizes = [len(m) for m in maximal]
    if sum(sizes) == 0:
        raise InvalidInput("no maximal points to label")
    pooled = np.concatenate([np.asarray(m, dtype=np.float64).reshape(-1, 3) for m in maximal])
    idx, d2 = build_index(pooled).query(tgt)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    chart = np.searchsorted(offsets, idx, side="right") - 1
    sample = idx - offsets[chart]
    labels = []
    for k, n in enumerate(sizes):
        flags = np.zeros(n, dtype=bool)
        flags[sample[chart == k]] = True
        labels.append(flags)
    return Labeling(labels, chart, sample, d2)


def loss_reconstruction(target, maximal: list[np.ndarray], labeling: Labeling):
    """Mean squared distance from each target point to its assigned maximal point.

    Returns the loss and per-chart cotangents on the maximal points.
    """
    tgt = as_cloud(target, allow_empty=True)
    m = len(tgt)
    if m == 0:
        raise InvalidInput("target point cloud is empty")
    maximal = [np.asarray(p, dtype=np.float64).reshape(-1, 3) for p in maximal]
    offsets = np.concatenate([[0], np.cumsum([len(p) for p in maximal])]).astype(np.int64)
    diff = np.concatenate(maximal)[offsets[labeling.chart] + labeling.sample] - tgt
    value = float((diff**2).sum() / m)
    cot = [np.zeros_like(p) for p in maximal]
    for k in range(len(maximal)):
        sel = labeling.chart == k
        np.add.at(cot[k], labeling.sample[sel], 2.0 * diff[sel] / m)
    return value, cot


def loss_occupancy(labels: list[np.ndarray], values: list[np.ndarray]):
    """Mean binary cross-entropy of the labeling classifier over all charts.

    Returns the loss and per-chart cotangents on the classifier outputs.
    Predictions are clamped to ``[1e-7, 1 - 1e-7]``; clamped entries get a
    zero cotangent.
    """
    y = np.concatenate([np.asarray(l, dtype=np.float64).ravel() for l in labels])
    p_raw = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in values])
    n = len(y)
    if n == 0:
        return 0.0, [np.zeros(len(v)) for v in values]
    p = np.clip(p_raw, BCE_CLAMP, 1.0 - BCE_CLAMP)
    value = float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum() / n)
    grad = -(y / p - (1.0 - y) / (1.0 - p)) / n
    grad[(p_raw < BCE_CLAMP) | (p_raw > 1.0 - BCE_CLAMP)] = 0.0
    return value, np.split(grad, np.cumsum([len(v) for v in values])[:-1])


@dataclass(frozen=True)
class MetricTensor2:
    g: np.ndarray
    g_hat: np.ndarray
    trace: float
    trace_inv: float
    det: float


def metric_tensor(jac, eps: float = 0.0) -> MetricTensor2:
    """First fundamental form ``J^T J`` of one 3x2 Jacobian and its conditioned form."""
    j = np.asarray(jac, dtype=np.float64)
    if j.shape != (3, 2) or not np.all(np.isfinite(j)):
        raise InvalidInput("expected a finite 3x2 Jacobian")
    g = j.T @ j
    g_hat = g + eps * np.eye(2)
    tr = float(np.trace(g_hat))
    det = float(g_hat[0, 0] * g_hat[1, 1] - g_hat[0, 1] * g_hat[1, 0])
    if not det > 0.0:
        raise NumericalError("metric tensor is singular; use eps > 0")
    return MetricTensor2(g, g_hat, tr, tr / det, det)


def metric_terms(jacs, eps: float = 0.0):
    """Batched entries of the conditioned metric tensor.

    Returns ``(a, b, c)`` with ``g_hat = [[a, b], [b, c]]`` for every Jacobian
    in a ``(N, 3, 2)`` stack.
    """
    j = np.asarray(jacs, dtype=np.float64).reshape(-1, 3, 2)
    ju, jv = j[:, :, 0], j[:, :, 1]
    a = (ju * ju).sum(axis=1) + eps
    c = (jv * jv).sum(axis=1) + eps
    b = (ju * jv).sum(axis=1)
    return a, b, c


def dirichlet_means(jacs, eps: float = DEFAULT_EPS) -> tuple[float, float]:
    """Mean trace of ``g_hat`` and mean trace of its inverse."""
    a, b, c = metric_terms(jacs, eps)
    det = a * c - b * b
    if np.any(det <= 0.0):
        raise NumericalError("singular metric tensor in distortion energy; use eps > 0")
    tr = a + c
    return float(tr.mean()), float((tr / det).mean())


def ssde(jacs, scale: float, eps: float = DEFAULT_EPS) -> float:
    """Scaled symmetric Dirichlet energy at common scale ``L = scale``."""
    mean_tr, mean_inv = dirichlet_means(jacs, eps)
    s = scale * scale + eps
    return mean_tr / s + s * mean_inv


def optimal_scale(jacs, eps: float = DEFAULT_EPS) -> float:
    """Closed-form minimizer ``L`` of :func:`ssde`."""
    mean_tr, mean_inv = dirichlet_means(jacs, eps)
    return float(np.sqrt(max(np.sqrt(mean_tr / mean_inv) - eps, 0.0)))


def loss_distortion(jacs, eps: float = DEFAULT_EPS):
    """``2 sqrt(mean tr(g_hat) * mean tr(g_hat^-1))`` and its cotangent on each Jacobian.

    An empty sample set gives ``0`` with an empty cotangent.
    """
    j = np.asarray(jacs, dtype=np.float64).reshape(-1, 3, 2)
    n = len(j)
    if n == 0:
        return 0.0, np.zeros((0, 3, 2))
    a, b, c = metric_terms(j, eps)
    det = a * c - b * b
    if np.any(det <= 0.0):
        raise NumericalError("singular metric tensor in distortion loss; use eps > 0")
    tr = a + c
    mean_tr = tr.mean()
    mean_inv = (tr / det).mean()
    value = 2.0 * np.sqrt(mean_tr * mean_inv)
    d_tr = np.sqrt(mean_inv / mean_tr) / n
    d_inv = np.sqrt(mean_tr / mean_inv) / n
    # d(tr/det) with respect to the tensor entries a, b, c
    det2 = det * det
    fa = -(b * b + c * c) / det2
    fc = -(b * b + a * a) / det2
    fb = 2.0 * b * tr / det2
    ju, jv = j[:, :, 0], j[:, :, 1]
    ga = d_tr + d_inv * fa
    gc = d_tr + d_inv * fc
    gb = d_inv * fb
    cot = np.empty_like(j)
    cot[:, :, 0] = 2.0 * ga[:, None] * ju + gb[:, None] * jv
    cot[:, :, 1] = 2.0 * gc[:, None] * jv + gb[:, None] * ju
    return float(value), cot


def total_loss(weights: LossWeights, rec: float, occ: float, dist: float) -> float:
    terms = (rec, occ, dist)
    if not all(np.isfinite(t) for t in terms):
        raise NumericalError(f"non-finite loss term in {terms}")
    return weights.rec * rec + weights.occ * occ + weights.dist * dist


@dataclass(frozen=True)
class LossTerms:
    rec: float
    occ: float
    dist: float
    total: float
    n_labeled: int


def objective(atlas, target, batch: UVBatch, weights: LossWeights, eps: float = DEFAULT_EPS,
              with_grad: bool = True):
    """Evaluate the weighted training loss of ``atlas`` on one set of UV samples.

    Returns ``(terms, grads, labeling)``. ``grads`` is aligned with
    :meth:`MinimalAtlas.parameters` (``None`` when ``with_grad`` is false).
    The occupancy term sees maximal points as constants, so its gradient
    reaches classifier parameters only.
    """
    tgt = as_cloud(target)
    if batch.n_charts != atlas.n_charts:
        raise InvalidInput("UV batch chart count differs from the atlas")
    maximal = [mlp_forward(ch.phi, uv)[0] if len(uv) else np.zeros((0, 3))
               for ch, uv in zip(atlas.charts, batch.uvs)]
    labeling = label_nearest(tgt, maximal)

    # occupancy: classifier on stop-gradient maximal points
    ltapes, lvalues = [], []
    for ch, pts in zip(atlas.charts, maximal):
        out, tape = mlp_forward(ch.ltilde, positional_encode(ch.posenc, pts))
        ltapes.append(tape)
        lvalues.append(out[:, 0])
    occ, occ_cot = loss_occupancy(labeling.labels, lvalues)

    # reconstruction and distortion: both live on the labeled samples only
    sel = [np.flatnonzero(l) for l in labeling.labels]
    ptapes, jacs, sub_points = [], [], []
    for ch, uv, s in zip(atlas.charts, batch.uvs, sel):
        if len(s) == 0:
            ptapes.append(None)
            jacs.append(np.zeros((0, 3, 2)))
            sub_points.append(np.zeros((0, 3)))
            continue
        pts, jac, tape = mlp_forward(ch.phi, uv[s], with_jacobian=True)
        ptapes.append(tape)
        jacs.append(jac)
        sub_points.append(pts)
    # remap assignments into the labeled subsets
    lookup = np.full(len(batch), -1, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(batch.sizes)]).astype(np.int64)
    for k, s in enumerate(sel):
        lookup[offsets[k] + s] = np.arange(len(s))
    sub_sample = lookup[offsets[labeling.chart] + labeling.sample]
    sub_labeling = Labeling(labeling.labels, labeling.chart, sub_sample, labeling.sq_dist)
    rec, rec_cot = loss_reconstruction(tgt, sub_points, sub_labeling)
    dist, dist_cot = loss_distortion(np.concatenate(jacs), eps)
    total = total_loss(weights, rec, occ, dist)
    terms = LossTerms(rec, occ, dist, total, labeling.n_labeled)
    if not with_grad:
        return terms, None, labeling

    dist_split = np.split(dist_cot, np.cumsum([len(j) for j in jacs])[:-1])
    grads = []
    for k, ch in enumerate(atlas.charts):
        if ptapes[k] is None or (weights.rec == 0.0 and weights.dist == 0.0):
            grads += [np.zeros_like(a) for a in ch.phi.arrays()]
        else:
            gj = weights.dist * dist_split[k] if weights.dist != 0.0 else None
            grads += mlp_backward_params(ch.phi, ptapes[k], weights.rec * rec_cot[k], gj)
        if weights.occ == 0.0 or len(lvalues[k]) == 0:
            grads += [np.zeros_like(a) for a in ch.ltilde.arrays()]
        else:
            grads += mlp_backward_params(ch.ltilde, ltapes[k],
                                         weights.occ * occ_cot[k][:, None])
    return terms, grads, labeling
