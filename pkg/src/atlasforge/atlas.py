"""Minimal neural atlas: K charts, each a parameterization plus a labeling classifier.

A chart's occupancy at ``u`` is ``ltilde(phi(u)) / c > tau``, evaluated in the
division-free form ``ltilde(phi(u)) > tau * c``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from atlasforge.errors import InvalidInput, StateError
from atlasforge.geom import check_open_square
from atlasforge.nn import (
    MlpParams,
    PosEncConfig,
    ltilde_mlp,
    mlp_forward,
    params_from_bytes,
    params_to_bytes,
    phi_mlp,
    positional_encode,
)

DEFAULT_CHARTS = 3
DEFAULT_TAU = 0.5

_MAGIC = b"AFATLAS\x00"
_VERSION = 1


@dataclass
class Chart:
    phi: MlpParams
    ltilde: MlpParams
    posenc: PosEncConfig = field(default_factory=PosEncConfig)

    def __post_init__(self):
        if self.phi.in_dim != 2 or self.phi.out_dim != 3:
            raise InvalidInput("phi must map R^2 -> R^3")
        if self.ltilde.in_dim != self.posenc.out_dim(3) or self.ltilde.out_dim != 1:
            raise InvalidInput("ltilde input width must match the positional encoding")
        if self.ltilde.activations[-1] != "sigmoid":
            raise InvalidInput("ltilde must end in a sigmoid")

    def copy(self) -> "Chart":
        return Chart(self.phi.copy(), self.ltilde.copy(), self.posenc)


@dataclass
class MinimalAtlas:
    charts: list[Chart]
    label_frequency: float | None = None
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if len(self.charts) < 1:
            raise InvalidInput("an atlas needs at least one chart")
        if not 0.0 < self.tau < 1.0:
            raise InvalidInput("tau must lie in (0, 1)")
        if self.label_frequency is not None:
            self.set_label_frequency(self.label_frequency)

    @property
    def n_charts(self) -> int:
        return len(self.charts)

    def set_label_frequency(self, c: float) -> None:
        c = float(c)
        if not 0.0 < c <= 1.0:
            raise InvalidInput(f"label frequency must lie in (0, 1], got {c}")
        self.label_frequency = c

    def copy(self) -> "MinimalAtlas":
        return MinimalAtlas([ch.copy() for ch in self.charts], self.label_frequency, self.tau)

    def parameters(self) -> list[np.ndarray]:
        """Every trainable array, chart by chart: phi arrays then ltilde arrays."""
        out = []
        for ch in self.charts:
            out += ch.phi.arrays() + ch.ltilde.arrays()
        return out


def init_atlas(n_charts: int = DEFAULT_CHARTS, hidden: int = 128,
               rng: np.random.Generator | None = None, posenc: PosEncConfig | None = None,
               tau: float = DEFAULT_TAU) -> MinimalAtlas:
    rng = np.random.default_rng() if rng is None else rng
    posenc = PosEncConfig() if posenc is None else posenc
    charts = [
        Chart(phi_mlp(hidden, rng), ltilde_mlp(hidden, posenc.out_dim(3), rng), posenc)
        for _ in range(n_charts)
    ]
    return MinimalAtlas(charts, tau=tau)


def _chart(atlas: MinimalAtlas, k: int) -> Chart:
    if not 0 <= k < atlas.n_charts:
        raise InvalidInput(f"chart {k} out of range for {atlas.n_charts} charts")
    return atlas.charts[k]


def phi_eval(atlas: MinimalAtlas, k: int, uvs) -> np.ndarray:
    """Maximal surface points of chart ``k`` at the given open-square samples."""
    uv = check_open_square(uvs)
    if len(uv) == 0:
        return np.zeros((0, 3))
    return mlp_forward(_chart(atlas, k).phi, uv)[0]


def ltilde_eval(atlas: MinimalAtlas, k: int, points) -> np.ndarray:
    """Probability that each maximal point of chart ``k`` carries a positive label."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0)
    ch = _chart(atlas, k)
    return mlp_forward(ch.ltilde, positional_encode(ch.posenc, pts))[0][:, 0]


def labeling_probability(atlas: MinimalAtlas, k: int, uvs) -> np.ndarray:
    return ltilde_eval(atlas, k, phi_eval(atlas, k, uvs))


def occupied_from_values(values, c: float, tau: float) -> np.ndarray:
    return np.asarray(values) > tau * c


def occupied(atlas: MinimalAtlas, k: int, uvs) -> np.ndarray:
    """Occupancy flags for chart ``k``; requires the label frequency to be set."""
    if atlas.label_frequency is None:
        raise StateError("label frequency is not set; estimate it before querying occupancy")
    return occupied_from_values(labeling_probability(atlas, k, uvs),
                                atlas.label_frequency, atlas.tau)


def atlas_to_bytes(atlas: MinimalAtlas, metadata: dict | None = None) -> bytes:
    """Serialize an atlas.

    Layout: 8-byte magic ``AFATLAS\\0``; ``<u4`` version; ``<u4`` header length;
    UTF-8 JSON header (charts, tau, label_frequency, posenc, hidden widths,
    free-form ``metadata``); then per chart a ``<u8``-length-prefixed phi blob
    and ltilde blob in the MLP checkpoint format.
    """
    header = {
        "charts": atlas.n_charts,
        "tau": atlas.tau,
        "label_frequency": atlas.label_frequency,
        "posenc": {"octaves": atlas.charts[0].posenc.octaves,
                   "include_raw": atlas.charts[0].posenc.include_raw},
        "hidden": [ch.phi.layers[0].v.shape[0] for ch in atlas.charts],
        "metadata": metadata or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = [_MAGIC, struct.pack("<II", _VERSION, len(raw)), raw]
    for ch in atlas.charts:
        for params in (ch.phi, ch.ltilde):
            blob = params_to_bytes(params)
            buf += [struct.pack("<Q", len(blob)), blob]
    return b"".join(buf)


def atlas_from_bytes(data: bytes) -> tuple[MinimalAtlas, dict]:
    """Inverse of :func:`atlas_to_bytes`; returns the atlas and its metadata."""
    if data[:8] != _MAGIC:
        raise InvalidInput("not an atlas checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != _VERSION:
        raise InvalidInput(f"unsupported atlas checkpoint version {version}")
    off = 16
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    posenc = PosEncConfig(**header["posenc"])
    charts = []
    for _ in range(header["charts"]):
        blobs = []
        for _ in range(2):
            (n,) = struct.unpack_from("<Q", data, off)
            off += 8
            blobs.append(params_from_bytes(data[off:off + n]))
            off += n
        charts.append(Chart(blobs[0], blobs[1], posenc))
    if off != len(data):
        raise InvalidInput("trailing bytes in atlas checkpoint")
    atlas = MinimalAtlas(charts, header["label_frequency"], header["tau"])
    return atlas, header.get("metadata", {})
