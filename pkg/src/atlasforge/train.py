"""Per-surface fitting loop: UV resampling, loss assembly and Adam updates."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from atlasforge.atlas import MinimalAtlas, init_atlas
from atlasforge.errors import InvalidInput, NumericalError
from atlasforge.geom import as_cloud, sample_uv_batch
from atlasforge.losses import DEFAULT_EPS, LossWeights, objective
from atlasforge.nn import PosEncConfig

log = logging.getLogger(__name__)

MILESTONES = (0.80, 0.93, 0.97)


@dataclass(frozen=True)
class TrainConfig:
    charts: int = 3
    uv_samples_total: int = 5000
    iterations: int = 2000
    lr: float = 1e-3
    lr_decay: float = 0.1
    milestones: tuple[float, ...] = MILESTONES
    weights: LossWeights = field(default_factory=LossWeights)
    eps: float = DEFAULT_EPS
    seed: int = 0
    hidden: int = 128
    octaves: int = 6

    def __post_init__(self):
        if self.charts < 1:
            raise InvalidInput("need at least one chart")
        if self.uv_samples_total < self.charts:
            raise InvalidInput("uv_samples_total must be at least the chart count")
        if self.iterations < 1:
            raise InvalidInput("iterations must be >= 1")
        if not self.lr >= 0:
            raise InvalidInput("lr must be non-negative")
        if self.hidden < 1:
            raise InvalidInput("hidden width must be positive")

    def lr_at(self, step: int) -> float:
        """Step-decayed learning rate; milestones are fractions of ``iterations``."""
        drops = sum(step >= math.floor(m * self.iterations) for m in self.milestones)
        return self.lr * self.lr_decay**drops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


class AdamState:
    """Adam moments for a fixed list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step = 0

    def update(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        if len(params) != len(self.m):
            raise InvalidInput("parameter list changed shape since the optimizer was built")
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step
        c2 = 1.0 - b2**self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr != 0.0:
                p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class StepReport:
    step: int
    rec: float
    occ: float
    dist: float
    total: float
    lr: float
    n_labeled: int


def train_step(atlas: MinimalAtlas, target, cfg: TrainConfig, adam: AdamState,
               rng: np.random.Generator, step: int = 0) -> StepReport:
    """One optimization step on freshly drawn UV samples."""
    batch = sample_uv_batch(cfg.uv_samples_total, atlas.n_charts, rng)
    terms, grads, _ = objective(atlas, target, batch, cfg.weights, cfg.eps)
    if not np.isfinite(terms.total) or not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericalError(f"non-finite loss or gradient at step {step}")
    lr = cfg.lr_at(step)
    adam.update(atlas.parameters(), grads, lr)
    return StepReport(step, terms.rec, terms.occ, terms.dist, terms.total, lr, terms.n_labeled)


class TrainingAborted(NumericalError):
    """A step produced a non-finite value; ``atlas`` holds the last good state."""

    def __init__(self, message, atlas: MinimalAtlas, history: list[StepReport]):
        super().__init__(message)
        self.atlas = atlas
        self.history = history


def fit(target, cfg: TrainConfig, atlas: MinimalAtlas | None = None, callback=None):
    """Fit an atlas to a unit-ball normalized target cloud.

    The returned atlas has no label frequency. ``callback(step, atlas,
    report)`` runs after every step. On a numerical failure
    :class:`TrainingAborted` carries a copy of the last good atlas.
    """
    tgt = as_cloud(target)
    rng = np.random.default_rng(cfg.seed)
    if atlas is None:
        atlas = init_atlas(cfg.charts, cfg.hidden, rng, PosEncConfig(cfg.octaves))
    adam = AdamState(atlas.parameters())
    history: list[StepReport] = []
    for step in range(cfg.iterations):
        good = atlas.copy()
        try:
            report = train_step(atlas, tgt, cfg, adam, rng, step)
        except NumericalError as exc:
            raise TrainingAborted(str(exc), good, history) from exc
        history.append(report)
        if callback is not None:
            callback(step, atlas, report)
        if step % 100 == 0 or step == cfg.iterations - 1:
            log.info("step %d rec=%.3e occ=%.4f dist=%.4f lr=%.1e |V*|=%d", step,
                     report.rec, report.occ, report.dist, report.lr, report.n_labeled)
    return atlas, history


HISTORY_FIELDS = ("step", "L_rec", "L_occ", "L_dist", "total", "lr")


def write_history_csv(path, history: list[StepReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in history:
            w.writerow([r.step, repr(r.rec), repr(r.occ), repr(r.dist), repr(r.total), repr(r.lr)])


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
