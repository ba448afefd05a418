"""Hand-wired atlases with known behaviour, for tests and smoke runs.

The planar parameterization relies on SoftPlus being the identity beyond its
overflow cutoff: hidden pre-activations are shifted by +2 so ``beta z`` stays
above 30 on the whole open square, which makes ``phi(u, v) = s * (u, v, 0)``
hold to rounding and its Jacobian exact.
"""

from __future__ import annotations

import numpy as np

from atlasforge.atlas import Chart, MinimalAtlas
from atlasforge.nn import MlpParams, PosEncConfig, from_weights

_SHIFT = 2.0


def plane_phi(hidden: int = 4, scale: float = 1.0, offset=(0.0, 0.0, 0.0)) -> MlpParams:
    """Parameterization ``(u, v) -> scale * (u, v, 0) + offset``."""
    if hidden < 2:
        raise ValueError("need at least two hidden units")
    w0 = np.zeros((hidden, 2))
    w0[0, 0] = w0[1, 1] = 1.0
    b0 = np.zeros(hidden)
    b0[:2] = _SHIFT
    w1 = np.zeros((hidden, hidden))
    w1[0, 0] = w1[1, 1] = 1.0
    w2 = np.zeros((hidden, hidden + 2))
    w2[0, 0] = w2[1, 1] = 1.0
    w3 = np.zeros((3, hidden))
    w3[0, 0] = w3[1, 1] = scale
    b3 = np.asarray(offset, dtype=np.float64) - np.array([scale * _SHIFT, scale * _SHIFT, 0.0])
    return from_weights([w0, w1, w2, w3], [b0, np.zeros(hidden), np.zeros(hidden), b3],
                        ["softplus", "softplus", "softplus", "linear"], skip_at=2)


def constant_ltilde(value: float, hidden: int = 4, posenc: PosEncConfig = PosEncConfig()) -> MlpParams:
    """Classifier returning ``value`` everywhere (all weights zero, output bias = logit)."""
    d = posenc.out_dim(3)
    logit = float(np.log(value) - np.log1p(-value))
    return from_weights(
        [np.zeros((hidden, d)), np.zeros((hidden, hidden)), np.zeros((hidden, hidden + d)),
         np.zeros((1, hidden))],
        [np.zeros(hidden), np.zeros(hidden), np.zeros(hidden), [logit]],
        ["relu", "relu", "relu", "sigmoid"], skip_at=2)


def halfplane_ltilde(axis: int = 0, sharpness: float = 1000.0, hidden: int = 4,
                     posenc: PosEncConfig = PosEncConfig()) -> MlpParams:
    """Classifier ``sigmoid(-sharpness * x[axis])``: above 1/2 exactly where ``x[axis] < 0``."""
    if not posenc.include_raw:
        raise ValueError("half-plane classifier reads the raw coordinates")
    d = posenc.out_dim(3)
    w0 = np.zeros((hidden, d))
    w0[0, axis] = -1.0
    w0[1, axis] = 1.0
    w1 = np.zeros((hidden, hidden))
    w1[0, 0] = w1[1, 1] = 1.0
    w2 = np.zeros((hidden, hidden + d))
    w2[0, 0] = w2[1, 1] = 1.0
    w3 = np.zeros((1, hidden))
    w3[0, 0] = sharpness
    w3[0, 1] = -sharpness
    return from_weights([w0, w1, w2, w3], [np.zeros(hidden)] * 3 + [[0.0]],
                        ["relu", "relu", "relu", "sigmoid"], skip_at=2)


def toy_atlas(n_charts: int = 1, field: str = "full", scale: float = 1.0,
              label_frequency: float | None = 1.0, tau: float = 0.5,
              offsets=None) -> MinimalAtlas:
    """Planar charts with a constant or half-plane classifier.

    ``field`` is ``"full"`` (classifier 0.99 everywhere), ``"empty"`` (1e-4),
    ``"half"`` (occupied where ``u < 0``) or a float constant.
    """
    posenc = PosEncConfig()
    charts = []
    for k in range(n_charts):
        off = (0.0, 0.0, 0.0) if offsets is None else offsets[k]
        if field == "half":
            lt = halfplane_ltilde(posenc=posenc)
        elif field == "full":
            lt = constant_ltilde(0.99, posenc=posenc)
        elif field == "empty":
            lt = constant_ltilde(1e-4, posenc=posenc)
        else:
            lt = constant_ltilde(float(field), posenc=posenc)
        charts.append(Chart(plane_phi(scale=scale, offset=off), lt, posenc))
    return MinimalAtlas(charts, label_frequency, tau)
