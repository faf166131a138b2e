"""Feedforward networks, exact Jacobians, and the neural state-space model.

The model consists of a state-transition network ``f_net`` (input nx+nu,
output nx), an output network ``h_net`` (nx -> ny), and an optional encoder
network mapping a window of past inputs and past-and-current outputs to the
current state. Per-channel input/output standardization is folded into
equivalent first/last affine layers once, so every downstream consumer
(evaluation, Jacobians, ray quadrature) sees plain MLPs in raw units.

Models are immutable after construction/load and safe to evaluate
concurrently.
"""

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigurationError, SchemaError

MODEL_SCHEMA_VERSION = 1

_ACT_CODES = {
    "linear": kernels.ACT_LINEAR,
    "tanh": kernels.ACT_TANH,
    "relu": kernels.ACT_RELU,
}


@dataclass(frozen=True)
class Layer:
    """One affine layer followed by an elementwise activation."""

    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        b = np.asarray(self.bias, dtype=np.float64).ravel()
        if w.shape[0] != b.shape[0]:
            raise ValueError(f"bias size {b.shape[0]} != rows of weights {w.shape[0]}")
        if self.activation not in _ACT_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


class Mlp:
    """Feedforward network with linear input/output layers.

    Hidden activations default to tanh; the final layer is linear unless
    explicitly tagged otherwise.
    """

    def __init__(self, layers: Sequence[Layer]):
        layers = [l if isinstance(l, Layer) else Layer(*l) for l in layers]
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for prev, cur in zip(layers, layers[1:]):
            if cur.weights.shape[1] != prev.weights.shape[0]:
                raise ValueError(
                    f"layer dimension mismatch: {prev.weights.shape} -> {cur.weights.shape}"
                )
        self.layers = tuple(layers)
        self.n_in = layers[0].weights.shape[1]
        self.n_out = layers[-1].weights.shape[0]
        self._kernel = kernels.make_kernel(
            [l.weights for l in layers],
            [l.bias for l in layers],
            [_ACT_CODES[l.activation] for l in layers],
        )

    @classmethod
    def random(cls, sizes: Sequence[int], rng: np.random.Generator,
               hidden_activation: str = "tanh", output_scale: float = 1.0) -> "Mlp":
        """Glorot-uniform initialized net with the given layer sizes."""
        layers = []
        n_layers = len(sizes) - 1
        for i in range(n_layers):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            act = hidden_activation if i < n_layers - 1 else "linear"
            if i == n_layers - 1:
                w *= output_scale
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @classmethod
    def linear(cls, weights: np.ndarray, bias: Optional[np.ndarray] = None) -> "Mlp":
        """Single linear layer, i.e. an LTI map."""
        w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
        b = np.zeros(w.shape[0]) if bias is None else bias
        return cls([Layer(w, b, "linear")])

    def forward(self, z: np.ndarray) -> np.ndarray:
        z = _check_vector(z, self.n_in, "network input")
        return self._kernel.forward(z)

    __call__ = forward

    def forward_batch(self, zs: np.ndarray) -> np.ndarray:
        zs = np.asarray(zs, dtype=np.float64)
        if zs.ndim != 2 or zs.shape[1] != self.n_in:
            raise ValueError(f"expected (n, {self.n_in}) batch, got {zs.shape}")
        return self._kernel.forward_batch(zs)

    def jacobian(self, z: np.ndarray) -> np.ndarray:
        z = _check_vector(z, self.n_in, "network input")
        return self._kernel.value_and_jacobian(z)[1]

    def value_and_jacobian(self, z: np.ndarray):
        z = _check_vector(z, self.n_in, "network input")
        return self._kernel.value_and_jacobian(z)

    def simpson_jacobian(self, p: np.ndarray, subintervals: int) -> np.ndarray:
        p = _check_vector(p, self.n_in, "ray endpoint")
        return self._kernel.simpson_jacobian(p, subintervals)

    @property
    def parameter_count(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)


def _check_vector(z, size, what) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.shape[0] != size:
        raise ValueError(f"{what} has size {z.shape[0]}, expected {size}")
    return z


@dataclass(frozen=True)
class IoNorm:
    """Per-channel affine standardization for inputs and outputs."""

    u_mean: np.ndarray
    u_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray

    def __post_init__(self):
        for name in ("u_mean", "u_scale", "y_mean", "y_scale"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).ravel())
        if np.any(self.u_scale <= 0) or np.any(self.y_scale <= 0):
            raise ValueError("normalization scales must be strictly positive")

    @classmethod
    def identity(cls, nu: int, ny: int) -> "IoNorm":
        return cls(np.zeros(nu), np.ones(nu), np.zeros(ny), np.ones(ny))


@dataclass(frozen=True)
class IoWindow:
    """Past inputs and past-and-current outputs feeding the encoder.

    ``u_past`` holds n = max(na, nb) samples (oldest first), ``y_past`` holds
    n+1 samples ending at the current output.
    """

    u_past: np.ndarray  # (n, nu)
    y_past: np.ndarray  # (n + 1, ny)

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.u_past, dtype=np.float64))
        y = np.atleast_2d(np.asarray(self.y_past, dtype=np.float64))
        if y.shape[0] != u.shape[0] + 1:
            raise ValueError(
                f"window needs n input samples and n+1 output samples, "
                f"got {u.shape[0]} and {y.shape[0]}"
            )
        object.__setattr__(self, "u_past", u)
        object.__setattr__(self, "y_past", y)


class AnnSsModel:
    """Identified neural state-space model with optional encoder/normalization."""

    def __init__(self, f_net: Mlp, h_net: Mlp, nx: int, nu: int, ny: int,
                 na: int = 0, nb: int = 0, encoder_net: Optional[Mlp] = None,
                 io_norm: Optional[IoNorm] = None):
        if min(nx, nu, ny) < 1:
            raise ValueError("nx, nu, ny must be positive")
        if f_net.n_in != nx + nu or f_net.n_out != nx:
            raise ValueError(
                f"f_net must map {nx + nu} -> {nx}, maps {f_net.n_in} -> {f_net.n_out}"
            )
        if h_net.n_in != nx or h_net.n_out != ny:
            raise ValueError(
                f"h_net must map {nx} -> {ny}, maps {h_net.n_in} -> {h_net.n_out}"
            )
        if encoder_net is not None:
            expected = nb * nu + (na + 1) * ny
            if encoder_net.n_in != expected or encoder_net.n_out != nx:
                raise ValueError(
                    f"encoder must map {expected} -> {nx}, "
                    f"maps {encoder_net.n_in} -> {encoder_net.n_out}"
                )
        if io_norm is not None and (io_norm.u_mean.size != nu or io_norm.y_mean.size != ny):
            raise ValueError("io_norm channel counts do not match nu/ny")
        self.f_net = f_net
        self.h_net = h_net
        self.encoder_net = encoder_net
        self.nx, self.nu, self.ny = nx, nu, ny
        self.na, self.nb = na, nb
        self.io_norm = io_norm
        self._f_eff = _fold_input_norm(f_net, _norm_vectors_f(self)) if io_norm else f_net
        self._h_eff = _fold_output_norm(h_net, io_norm) if io_norm else h_net
        if encoder_net is not None and io_norm is not None:
            self._enc_eff = _fold_input_norm(encoder_net, _norm_vectors_encoder(self))
        else:
            self._enc_eff = encoder_net
        # constant affine offsets of the exact LPV factorization
        self._v = self._f_eff.forward(np.zeros(nx + nu))
        self._w = self._h_eff.forward(np.zeros(nx))

    @property
    def lag(self) -> int:
        """Window length n = max(na, nb)."""
        return max(self.na, self.nb)

    @property
    def transition_map(self) -> Mlp:
        """f as an MLP over raw (x, u) with normalization folded in."""
        return self._f_eff

    @property
    def output_map(self) -> Mlp:
        """h as an MLP over x producing raw outputs."""
        return self._h_eff

    @property
    def v_offset(self) -> np.ndarray:
        """f(0, 0): the constant state offset of the factorized form."""
        return self._v.copy()

    @property
    def w_offset(self) -> np.ndarray:
        """h(0): the constant output offset of the factorized form."""
        return self._w.copy()

    def f_eval(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = _check_vector(x, self.nx, "state")
        u = _check_vector(u, self.nu, "input")
        return self._f_eff.forward(np.concatenate([x, u]))

    def h_eval(self, x: np.ndarray) -> np.ndarray:
        x = _check_vector(x, self.nx, "state")
        return self._h_eff.forward(x)

    def encode_state(self, window: IoWindow) -> np.ndarray:
        if self._enc_eff is None:
            raise ConfigurationError("model has no encoder network")
        n = self.lag
        if window.u_past.shape != (n, self.nu) or window.y_past.shape != (n + 1, self.ny):
            raise ValueError(
                f"window shapes {window.u_past.shape}/{window.y_past.shape} do not "
                f"match lags na={self.na}, nb={self.nb}"
            )
        # encoder consumes the last nb inputs and last na+1 outputs
        vec = np.concatenate([
            window.u_past[n - self.nb:].ravel(),
            window.y_past[n - self.na:].ravel(),
        ])
        return self._enc_eff.forward(vec)


def _norm_vectors_f(model: AnnSsModel):
    norm = model.io_norm
    mean = np.concatenate([np.zeros(model.nx), norm.u_mean])
    scale = np.concatenate([np.ones(model.nx), norm.u_scale])
    return mean, scale


def _norm_vectors_encoder(model: AnnSsModel):
    norm = model.io_norm
    mean = np.concatenate([
        np.tile(norm.u_mean, model.nb),
        np.tile(norm.y_mean, model.na + 1),
    ])
    scale = np.concatenate([
        np.tile(norm.u_scale, model.nb),
        np.tile(norm.y_scale, model.na + 1),
    ])
    return mean, scale


def _fold_input_norm(net: Mlp, mean_scale) -> Mlp:
    # W (z - mean)/scale + b  ==  (W/scale) z + (b - W (mean/scale))
    mean, scale = mean_scale
    first = net.layers[0]
    w = first.weights / scale[None, :]
    b = first.bias - w @ mean
    return Mlp([Layer(w, b, first.activation), *net.layers[1:]])


def _fold_output_norm(net: Mlp, norm: IoNorm) -> Mlp:
    last = net.layers[-1]
    w = norm.y_scale[:, None] * last.weights
    b = norm.y_mean + norm.y_scale * last.bias
    return Mlp([*net.layers[:-1], Layer(w, b, last.activation)])


# ---------------------------------------------------------------------------
# functional op surface
# ---------------------------------------------------------------------------

def mlp_forward(net: Mlp, z: np.ndarray) -> np.ndarray:
    return net.forward(z)


def mlp_jacobian(net: Mlp, z: np.ndarray) -> np.ndarray:
    return net.jacobian(z)


def f_eval(model: AnnSsModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return model.f_eval(x, u)


def h_eval(model: AnnSsModel, x: np.ndarray) -> np.ndarray:
    return model.h_eval(x)


def encode_state(model: AnnSsModel, window: IoWindow) -> np.ndarray:
    return model.encode_state(window)


# ---------------------------------------------------------------------------
# serialization (JSON, versioned)
# ---------------------------------------------------------------------------

def _net_to_json(net: Optional[Mlp]):
    if net is None:
        return None
    return [
        {
            "weights": l.weights.tolist(),
            "bias": l.bias.tolist(),
            "activation": l.activation,
        }
        for l in net.layers
    ]


def _net_from_json(obj, what: str) -> Optional[Mlp]:
    if obj is None:
        return None
    try:
        layers = [
            Layer(np.asarray(l["weights"]), np.asarray(l["bias"]), l.get("activation", "linear"))
            for l in obj
        ]
        return Mlp(layers)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed {what} in model file: {exc}") from exc


def save_model(model: AnnSsModel, path) -> None:
    doc = {
        "version": MODEL_SCHEMA_VERSION,
        "nx": model.nx,
        "nu": model.nu,
        "ny": model.ny,
        "na": model.na,
        "nb": model.nb,
        "io_norm": None if model.io_norm is None else {
            "u_mean": model.io_norm.u_mean.tolist(),
            "u_scale": model.io_norm.u_scale.tolist(),
            "y_mean": model.io_norm.y_mean.tolist(),
            "y_scale": model.io_norm.y_scale.tolist(),
        },
        "f_net": _net_to_json(model.f_net),
        "h_net": _net_to_json(model.h_net),
        "encoder_net": _net_to_json(model.encoder_net),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path) -> AnnSsModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read model file {path}: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise SchemaError(f"{path} is not a model file (missing version)")
    if doc["version"] != MODEL_SCHEMA_VERSION:
        raise SchemaError(
            f"unsupported model schema version {doc['version']} "
            f"(expected {MODEL_SCHEMA_VERSION})"
        )
    missing = {"nx", "nu", "ny", "na", "nb", "f_net", "h_net"} - doc.keys()
    if missing:
        raise SchemaError(f"model file missing fields: {sorted(missing)}")
    norm = doc.get("io_norm")
    io_norm = None if norm is None else IoNorm(
        np.asarray(norm["u_mean"]), np.asarray(norm["u_scale"]),
        np.asarray(norm["y_mean"]), np.asarray(norm["y_scale"]),
    )
    try:
        return AnnSsModel(
            f_net=_net_from_json(doc["f_net"], "f_net"),
            h_net=_net_from_json(doc["h_net"], "h_net"),
            encoder_net=_net_from_json(doc.get("encoder_net"), "encoder_net"),
            nx=doc["nx"], nu=doc["nu"], ny=doc["ny"],
            na=doc["na"], nb=doc["nb"], io_norm=io_norm,
        )
    except ValueError as exc:
        raise SchemaError(f"inconsistent model file {path}: {exc}") from exc
