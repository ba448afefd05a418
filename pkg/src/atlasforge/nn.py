"""Weight-normalized MLPs with reverse-mode parameter gradients.

A forward pass can optionally carry forward-mode tangents with respect to the
network input. The tangents give the exact input Jacobian, and because the
tape records them, :func:`mlp_backward_params` can push cotangents on the
Jacobian back into the parameters as well. That second-order path is what the
metric distortion loss needs.

Shapes: inputs ``(N, D)``, outputs ``(N, E)``, tangents ``(N, D, width)``,
Jacobians ``(N, E, D)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numba
import numpy as np

from atlasforge.errors import InvalidInput, UsageError

ACTIVATIONS = ("linear", "softplus", "relu", "sigmoid")
SOFTPLUS_BETA = 100.0
_SOFTPLUS_CUTOFF = 30.0

_MAGIC = b"AFMLP\x00\x00\x00"
_VERSION = 1


@dataclass
class DenseLayer:
    """Dense layer with weight ``W = g * V / ||V_row||``."""

    v: np.ndarray
    g: np.ndarray
    b: np.ndarray

    def weight(self) -> tuple[np.ndarray, np.ndarray]:
        norms = np.sqrt((self.v**2).sum(axis=1))
        return self.g[:, None] * self.v / norms[:, None], norms

    @property
    def shape(self) -> tuple[int, int]:
        return self.v.shape


@dataclass
class MlpParams:
    layers: list[DenseLayer]
    activations: list[str]
    skip_at: int | None = None
    beta: float = SOFTPLUS_BETA

    def __post_init__(self):
        if len(self.layers) != len(self.activations):
            raise InvalidInput("one activation per layer required")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise InvalidInput(f"unknown activation {act!r}")
        width = self.in_dim
        for i, layer in enumerate(self.layers):
            expected = width + (self.in_dim if i == self.skip_at else 0)
            if layer.v.shape[1] != expected:
                raise InvalidInput(
                    f"layer {i} expects {layer.v.shape[1]} inputs, previous layer gives {expected}"
                )
            if layer.g.shape != (layer.v.shape[0],) or layer.b.shape != (layer.v.shape[0],):
                raise InvalidInput(f"layer {i} gain/bias shape mismatch")
            if np.any((layer.v**2).sum(axis=1) == 0.0):
                raise InvalidInput(f"layer {i} has a zero direction row")
            width = layer.v.shape[0]

    @property
    def in_dim(self) -> int:
        first = self.layers[0].v.shape[1]
        return first // 2 if self.skip_at == 0 else first

    @property
    def out_dim(self) -> int:
        return self.layers[-1].v.shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (V, g, b per layer); mutable views."""
        out = []
        for layer in self.layers:
            out += [layer.v, layer.g, layer.b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            [DenseLayer(l.v.copy(), l.g.copy(), l.b.copy()) for l in self.layers],
            list(self.activations), self.skip_at, self.beta,
        )

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_mlp(sizes, activations, rng: np.random.Generator, skip_at: int | None = None,
             beta: float = SOFTPLUS_BETA) -> MlpParams:
    """Glorot-uniform directions, gains equal to the initial row norms, zero biases.

    ``sizes`` lists the input width followed by each layer's output width.
    """
    in_dim = sizes[0]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i == skip_at:
            fan_in += in_dim
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        v = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(DenseLayer(v, np.sqrt((v**2).sum(axis=1)), np.zeros(fan_out)))
    return MlpParams(layers, list(activations), skip_at, beta)


def from_weights(weights, biases, activations, skip_at=None, beta=SOFTPLUS_BETA) -> MlpParams:
    """Build weight-normalized params whose effective weights equal ``weights``.

    All-zero rows get a unit direction and a zero gain.
    """
    layers = []
    for w, b in zip(weights, biases):
        w = np.array(w, dtype=np.float64, ndmin=2)
        norms = np.sqrt((w**2).sum(axis=1))
        v = w.copy()
        v[norms == 0.0] = 1.0
        layers.append(DenseLayer(v, norms, np.array(b, dtype=np.float64).reshape(-1)))
    return MlpParams(layers, list(activations), skip_at, beta)


def phi_mlp(hidden: int, rng: np.random.Generator, in_dim: int = 2, out_dim: int = 3) -> MlpParams:
    """Surface parameterization net: 4 layers, SoftPlus, input re-injected before layer 3."""
    return init_mlp([in_dim, hidden, hidden, hidden, out_dim],
                    ["softplus", "softplus", "softplus", "linear"], rng, skip_at=2)


def ltilde_mlp(hidden: int, in_dim: int, rng: np.random.Generator) -> MlpParams:
    """Labeling classifier net: same skeleton with ReLU hidden units and a sigmoid output."""
    return init_mlp([in_dim, hidden, hidden, hidden, 1],
                    ["relu", "relu", "relu", "sigmoid"], rng, skip_at=2)


def activate(name: str, z: np.ndarray, beta: float = SOFTPLUS_BETA):
    """Return the activation value and its first and second derivatives at ``z``.

    SoftPlus is ``ln(1 + exp(beta z)) / beta``, replaced by ``z`` itself once
    ``beta z > 30``.
    """
    if name == "linear":
        return z, np.ones_like(z), np.zeros_like(z)
    zf = np.ascontiguousarray(z, dtype=np.float64).reshape(-1)
    if name == "relu":
        out = _relu_kernel(zf)
    elif name == "sigmoid":
        out = _sigmoid_kernel(zf)
    else:
        out = _softplus_kernel(zf, float(beta), _SOFTPLUS_CUTOFF)
    return tuple(a.reshape(z.shape) for a in out)


@numba.njit(cache=True)
def _softplus_kernel(z, beta, cutoff):
    n = z.shape[0]
    y = np.empty(n)
    d1 = np.empty(n)
    d2 = np.empty(n)
    for i in range(n):
        bz = beta * z[i]
        if bz > cutoff:
            y[i] = z[i]
            d1[i] = 1.0
            d2[i] = 0.0
        else:
            e = math.exp(-abs(bz))
            y[i] = (max(bz, 0.0) + math.log1p(e)) / beta
            s = 1.0 / (1.0 + e) if bz >= 0.0 else e / (1.0 + e)
            d1[i] = s
            d2[i] = beta * s * (1.0 - s)
    return y, d1, d2


@numba.njit(cache=True)
def _relu_kernel(z):
    n = z.shape[0]
    y = np.empty(n)
    d1 = np.empty(n)
    d2 = np.zeros(n)
    for i in range(n):
        if z[i] > 0.0:
            y[i] = z[i]
            d1[i] = 1.0
        else:
            y[i] = 0.0
            d1[i] = 0.0
    return y, d1, d2


@numba.njit(cache=True)
def _sigmoid_kernel(z):
    n = z.shape[0]
    y = np.empty(n)
    d1 = np.empty(n)
    d2 = np.empty(n)
    for i in range(n):
        if z[i] >= 0.0:
            s = 1.0 / (1.0 + math.exp(-z[i]))
        else:
            e = math.exp(z[i])
            s = e / (1.0 + e)
        y[i] = s
        d1[i] = s * (1.0 - s)
        d2[i] = d1[i] * (1.0 - 2.0 * s)
    return y, d1, d2


@dataclass
class Tape:
    inputs: np.ndarray
    layer_inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    norms: list = field(default_factory=list)
    derivs: list = field(default_factory=list)
    layer_tangents: list | None = None
    pre_tangents: list | None = None
    consumed: bool = False


def _check_inputs(params: MlpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise InvalidInput(f"expected inputs of width {params.in_dim}, got shape {x.shape}")
    return x


def mlp_forward(params: MlpParams, inputs, with_jacobian: bool = False):
    """Evaluate the network on a batch.

    Returns ``(outputs, tape)``, or ``(outputs, jacobians, tape)`` when
    ``with_jacobian`` is set.
    """
    x = _check_inputs(params, inputs)
    n, d = x.shape
    tape = Tape(inputs=x)
    h = x
    dx = dh = None
    if with_jacobian:
        dx = np.broadcast_to(np.eye(d), (n, d, d))
        dh = dx
        tape.layer_tangents, tape.pre_tangents = [], []
    for i, (layer, act) in enumerate(zip(params.layers, params.activations)):
        if i == params.skip_at:
            h = np.concatenate([h, x], axis=1)
            if with_jacobian:
                dh = np.concatenate([dh, dx], axis=2)
        w, norms = layer.weight()
        z = h @ w.T + layer.b
        tape.layer_inputs.append(h)
        tape.pre.append(z)
        tape.weights.append(w)
        tape.norms.append(norms)
        y, d1, d2 = activate(act, z, params.beta)
        tape.derivs.append((d1, d2))
        if with_jacobian:
            dz = dh @ w.T
            tape.layer_tangents.append(dh)
            tape.pre_tangents.append(dz)
            dh = d1[:, None, :] * dz
        h = y
    if with_jacobian:
        return h, np.swapaxes(dh, 1, 2), tape
    return h, tape


def mlp_backward_params(params: MlpParams, tape: Tape, output_cotangents,
                        jacobian_cotangents=None) -> list[np.ndarray]:
    """Gradient of ``<gy, outputs> + <gJ, jacobians>`` for every parameter array.

    The result is ordered like :meth:`MlpParams.arrays`. A tape may be consumed
    once only.
    """
    if tape.consumed:
        raise UsageError("tape already consumed by a backward pass")
    tape.consumed = True
    gh = np.asarray(output_cotangents, dtype=np.float64)
    gdh = None
    if jacobian_cotangents is not None:
        if tape.layer_tangents is None:
            raise UsageError("Jacobian cotangents need a forward pass with with_jacobian=True")
        gdh = np.swapaxes(np.asarray(jacobian_cotangents, dtype=np.float64), 1, 2)
    grads: list[np.ndarray] = [None] * (3 * len(params.layers))
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        z = tape.pre[i]
        a_in = tape.layer_inputs[i]
        w = tape.weights[i]
        d1, d2 = tape.derivs[i]
        gz = gh * d1
        if gdh is not None:
            dz = tape.pre_tangents[i]
            gdz = gdh * d1[:, None, :]
            gz = gz + d2 * np.einsum("njo,njo->no", dz, gdh)
        gw = gz.T @ a_in
        if gdh is not None:
            da_in = tape.layer_tangents[i]
            gw += gdz.reshape(-1, gdz.shape[2]).T @ da_in.reshape(-1, da_in.shape[2])
        gb = gz.sum(axis=0)
        # weight normalization chain rule
        norms = tape.norms[i]
        vhat = layer.v / norms[:, None]
        gg = (gw * vhat).sum(axis=1)
        gv = (layer.g / norms)[:, None] * (gw - gg[:, None] * vhat)
        grads[3 * i: 3 * i + 3] = [gv, gg, gb]
        if i == 0:
            break
        gh = gz @ w
        if gdh is not None:
            gdh = gdz @ w
        if i == params.skip_at:
            width = params.layers[i - 1].v.shape[0]
            gh = gh[:, :width]
            if gdh is not None:
                gdh = gdh[:, :, :width]
    return grads


def mlp_jacobian_input(params: MlpParams, u) -> np.ndarray:
    """Exact ``E x D`` Jacobian of the network output with respect to one input."""
    _, jac, _ = mlp_forward(params, np.asarray(u, dtype=np.float64).reshape(1, -1),
                            with_jacobian=True)
    return jac[0]


@dataclass(frozen=True)
class PosEncConfig:
    octaves: int = 6
    include_raw: bool = True

    def __post_init__(self):
        if self.octaves < 1:
            raise InvalidInput("positional encoding needs at least one octave")

    def out_dim(self, in_dim: int = 3) -> int:
        return in_dim * (int(self.include_raw) + 2 * self.octaves)


def positional_encode(cfg: PosEncConfig, x) -> np.ndarray:
    """Raw coordinates (optional) followed by ``sin, cos`` of ``2^i * pi * x``.

    Layout per octave ``i``: ``[sin(2^i pi x_1..3), cos(2^i pi x_1..3)]``.
    A single vector maps to a vector, a batch ``(N, 3)`` to ``(N, out_dim)``.
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    parts = [arr] if cfg.include_raw else []
    for i in range(cfg.octaves):
        ang = (2.0**i) * np.pi * arr
        parts += [np.sin(ang), np.cos(ang)]
    out = np.concatenate(parts, axis=1)
    return out[0] if single else out


_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}


def params_to_bytes(params: MlpParams) -> bytes:
    """Serialize to the versioned little-endian checkpoint layout.

    Layout: 8-byte magic ``AFMLP\\0\\0\\0``; ``<u4`` version; ``<u4`` layer count;
    ``<i4`` skip layer (-1 for none); ``<f8`` SoftPlus beta; per layer ``<u4``
    out, ``<u4`` in, ``<u4`` activation code; then per layer the f64 tensors
    V (row-major), g, b.
    """
    skip = -1 if params.skip_at is None else params.skip_at
    buf = [_MAGIC, struct.pack("<IIid", _VERSION, len(params.layers), skip, params.beta)]
    for layer, act in zip(params.layers, params.activations):
        out, inp = layer.v.shape
        buf.append(struct.pack("<III", out, inp, _ACT_CODES[act]))
    for layer in params.layers:
        for arr in (layer.v, layer.g, layer.b):
            buf.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(buf)


def params_from_bytes(data: bytes) -> MlpParams:
    if data[:8] != _MAGIC:
        raise InvalidInput("not an MLP parameter blob (bad magic)")
    version, n_layers, skip, beta = struct.unpack_from("<IIid", data, 8)
    if version != _VERSION:
        raise InvalidInput(f"unsupported MLP blob version {version}")
    off = 8 + struct.calcsize("<IIid")
    table = []
    for _ in range(n_layers):
        table.append(struct.unpack_from("<III", data, off))
        off += 12
    layers, acts = [], []
    for out, inp, code in table:
        arrays = []
        for count, shape in ((out * inp, (out, inp)), (out, (out,)), (out, (out,))):
            arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=off)
                          .astype(np.float64).reshape(shape))
            off += 8 * count
        layers.append(DenseLayer(*arrays))
        acts.append(ACTIVATIONS[code])
    if off != len(data):
        raise InvalidInput("trailing bytes in MLP blob")
    return MlpParams(layers, acts, None if skip < 0 else skip, beta)
