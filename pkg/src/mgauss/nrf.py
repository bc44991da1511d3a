"""Neural residual field: a small Fourier-encoded MLP with manual backprop.

The network maps a 3D coordinate to a bounded scalar correction
r(x) = 0.1 * tanh(MLP(encode(x))).  Encoding concatenates the raw
coordinates with sin/cos pairs at frequencies 2^k * pi, k = 0..L-1, per
coordinate, so the input width is 3 + 6 L.  Hidden layers use SiLU.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .core import sigmoid
from .errors import UninitializedField

OUTPUT_BOUND = 0.1
DEFAULT_BANDS = 6
DEFAULT_HIDDEN = (64, 64, 64, 64)


def fourier_encode(x, frequency_bands=DEFAULT_BANDS):
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(...)]."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    bands = int(frequency_bands)
    enc = np.empty((pts.shape[0], 3 + 6 * bands))
    enc[:, :3] = pts
    scaled = np.empty_like(pts)
    for k in range(bands):
        np.multiply(pts, (2.0**k) * np.pi, out=scaled)
        enc[:, 3 + 6 * k : 6 + 6 * k] = np.sin(scaled)
        enc[:, 6 + 6 * k : 9 + 6 * k] = np.cos(scaled)
    return enc[0] if single else enc


def silu(z):
    return z * sigmoid(z)


def silu_grad(z):
    s = sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


@dataclass
class ResidualField:
    """MLP weights plus the encoding/bound hyperparameters."""

    frequency_bands: int = DEFAULT_BANDS
    layer_widths: tuple = ()
    weights: list = dc_field(default_factory=list)  # per layer, (fan_in, fan_out)
    biases: list = dc_field(default_factory=list)  # per layer, (fan_out,)
    output_bound: float = OUTPUT_BOUND

    @classmethod
    def create(cls, rng=None, frequency_bands=DEFAULT_BANDS, hidden=DEFAULT_HIDDEN):
        """Initialize weights uniform in +-sqrt(6 / (fan_in + fan_out)).

        The final layer starts at zero so the residual is exactly zero at
        activation time and cannot fight the established Gaussian base.
        """
        rng = np.random.default_rng(rng)
        in_dim = 3 + 6 * int(frequency_bands)
        widths = (in_dim,) + tuple(hidden) + (1,)
        weights, biases = [], []
        for li in range(len(widths) - 1):
            fan_in, fan_out = widths[li], widths[li + 1]
            if li == len(widths) - 2:
                w = np.zeros((fan_in, fan_out))
            else:
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(
            frequency_bands=int(frequency_bands),
            layer_widths=widths,
            weights=weights,
            biases=biases,
        )

    def copy(self):
        return ResidualField(
            frequency_bands=self.frequency_bands,
            layer_widths=tuple(self.layer_widths),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            output_bound=self.output_bound,
        )

    def parameter_arrays(self):
        """Flat dict of parameter name -> array (shared, not copied)."""
        out = {}
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{li}"] = w
            out[f"b{li}"] = b
        return out


@dataclass
class NrfGradients:
    d_weights: list
    d_biases: list
    d_points: np.ndarray  # (B, 3) gradient w.r.t. the input coordinates


def _check_initialized(field):
    if not field.weights:
        raise UninitializedField("residual field has no weights")


def _forward_cached(field, x):
    enc = fourier_encode(np.atleast_2d(np.asarray(x, dtype=np.float64)),
                         field.frequency_bands)
    h = enc
    pre = []
    post = [enc]
    depth = len(field.weights)
    for li in range(depth):
        z = h @ field.weights[li] + field.biases[li]
        pre.append(z)
        if li < depth - 1:
            h = silu(z)
            post.append(h)
    t = np.tanh(pre[-1][:, 0])
    return field.output_bound * t, t, pre, post


def nrf_forward(field: ResidualField, x):
    """Residual values r(x); always within [-output_bound, output_bound]."""
    _check_initialized(field)
    single = np.asarray(x).ndim == 1
    r, _, _, _ = _forward_cached(field, x)
    return float(r[0]) if single else r


def nrf_forward_cached(field: ResidualField, x):
    """(values, cache) where the cache feeds :func:`nrf_backward`."""
    _check_initialized(field)
    r, t, pre, post = _forward_cached(field, x)
    return r, (t, pre, post)


def nrf_backward(field: ResidualField, x, upstream, cache=None):
    """Gradients of sum_b upstream[b] * r(x_b) w.r.t. weights, biases, inputs.

    ``cache`` may carry the activations from :func:`nrf_forward_cached` for
    the same (field, x); the forward pass is recomputed otherwise.
    """
    _check_initialized(field)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if cache is None:
        _, t, pre, post = _forward_cached(field, x)
    else:
        t, pre, post = cache
    depth = len(field.weights)
    d_weights = [None] * depth
    d_biases = [None] * depth

    dz = (upstream * field.output_bound * (1.0 - t * t))[:, None]
    for li in range(depth - 1, -1, -1):
        d_weights[li] = post[li].T @ dz
        d_biases[li] = dz.sum(axis=0)
        dh = dz @ field.weights[li].T
        if li > 0:
            dz = dh * silu_grad(pre[li - 1])
        else:
            d_enc = dh

    # Encoding jacobian: raw slot + per-band sin/cos slots per coordinate.
    d_points = d_enc[:, :3].copy()
    for k in range(field.frequency_bands):
        f = (2.0**k) * np.pi
        sin_slot = slice(3 + 6 * k, 6 + 6 * k)
        cos_slot = slice(6 + 6 * k, 9 + 6 * k)
        d_points += f * np.cos(f * x) * d_enc[:, sin_slot]
        d_points -= f * np.sin(f * x) * d_enc[:, cos_slot]
    return NrfGradients(d_weights=d_weights, d_biases=d_biases, d_points=d_points)
