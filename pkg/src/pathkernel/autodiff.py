"""Reverse-mode differentiation for small fully connected networks.

Everything here works on a *batch of parameter vectors* of shape ``(P, d)``
so that many independent training runs can be advanced in lockstep.  A
single parameter vector of shape ``(d,)`` is accepted everywhere and the
leading axis is dropped again on output.

Products are formed elementwise and reduced along the last (contiguous)
axis instead of going through BLAS.  This is slower than ``matmul`` but the
rounding of every entry then depends only on that entry's operands, not on
batch shape or on the number of BLAS threads.  Reproducibility across
thread counts and between vectorised and single-run code relies on it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity", "sigmoid")
LAYOUT_VERSION = 1

# upper bound on temporaries built by the elementwise products (in float64s)
_CHUNK_ELEMS = 1 << 21


class DimensionError(ValueError):
    """Shape mismatch; ``layer`` is the index of the offending layer."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class NonFiniteError(FloatingPointError):
    """A non-finite value appeared in layer ``layer`` (and optionally at ``step``)."""

    def __init__(self, message, layer=None, step=None):
        super().__init__(message)
        self.layer = layer
        self.step = step


@dataclass(frozen=True)
class Segment:
    layer: int
    kind: str  # "weight" or "bias"
    shape: tuple
    start: int
    stop: int


@dataclass(frozen=True)
class ModelSpec:
    """Fully connected network ``p -> h_1 -> ... -> m`` with identity output.

    ``activations`` has one entry per hidden layer.
    """

    layer_widths: tuple
    activations: tuple = ()
    output_activation: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        acts = self.activations
        if isinstance(acts, str):
            acts = (acts,) * max(len(widths) - 2, 0)
        object.__setattr__(self, "activations", tuple(acts))
        if len(widths) < 2:
            raise ValueError("a model needs at least an input and an output layer")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if len(self.activations) != len(widths) - 2:
            raise ValueError(
                f"expected {len(widths) - 2} hidden activations, got {len(self.activations)}"
            )
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.output_activation != "identity":
            raise ValueError("only identity output activation is supported")

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    @property
    def input_dim(self):
        return self.layer_widths[0]

    @property
    def output_dim(self):
        return self.layer_widths[-1]

    @property
    def n_params(self):
        w = self.layer_widths
        return sum((w[i] + 1) * w[i + 1] for i in range(len(w) - 1))

    @property
    def layout(self):
        """Canonical layout: layer-major, weight before bias, row-major weights."""
        segs, pos = [], 0
        w = self.layer_widths
        for i in range(len(w) - 1):
            n_w = w[i + 1] * w[i]
            segs.append(Segment(i, "weight", (w[i + 1], w[i]), pos, pos + n_w))
            pos += n_w
            segs.append(Segment(i, "bias", (w[i + 1],), pos, pos + w[i + 1]))
            pos += w[i + 1]
        return tuple(segs)

    def layer_activation(self, layer):
        return self.activations[layer] if layer < self.n_layers - 1 else self.output_activation

    def to_dict(self):
        return {
            "layer_widths": list(self.layer_widths),
            "activations": list(self.activations),
            "output_activation": self.output_activation,
            "layout_version": LAYOUT_VERSION,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("layout_version", LAYOUT_VERSION) != LAYOUT_VERSION:
            raise ValueError(f"unsupported parameter layout version {d['layout_version']}")
        return cls(tuple(d["layer_widths"]), tuple(d["activations"]), d.get("output_activation", "identity"))

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def unflatten(model, theta):
    """Split ``theta`` (``(d,)`` or ``(P, d)``) into per-layer ``(W, b)`` views."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1] != model.n_params:
        raise DimensionError(
            f"parameter vector has length {theta.shape[-1]}, model expects {model.n_params}"
        )
    lead = theta.shape[:-1]
    out = []
    segs = model.layout
    for i in range(0, len(segs), 2):
        sw, sb = segs[i], segs[i + 1]
        W = theta[..., sw.start:sw.stop].reshape(lead + sw.shape)
        b = theta[..., sb.start:sb.stop]
        out.append((W, b))
    return out


def flatten(model, layers):
    """Inverse of :func:`unflatten` for a single parameter vector."""
    parts = []
    for (W, b), i in zip(layers, range(model.n_layers)):
        w_in, w_out = model.layer_widths[i], model.layer_widths[i + 1]
        W = np.asarray(W, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if W.shape != (w_out, w_in) or b.shape != (w_out,):
            raise DimensionError(f"layer {i}: expected W {(w_out, w_in)} and b {(w_out,)}", layer=i)
        parts += [W.ravel(), b]
    return np.concatenate(parts)


def init_params(model, seed=0, bias_std=0.0, scale=1.0):
    """LeCun-normal weights (variance ``scale / fan_in``), normal biases.

    ``scale`` may be a sequence with one entry per layer.
    """
    rng = np.random.default_rng(seed)
    scales = np.broadcast_to(np.asarray(scale, dtype=np.float64), (model.n_layers,))
    layers = []
    for i in range(model.n_layers):
        w_in, w_out = model.layer_widths[i], model.layer_widths[i + 1]
        W = rng.normal(0.0, np.sqrt(scales[i] / w_in), size=(w_out, w_in))
        b = rng.normal(0.0, bias_std, size=w_out) if bias_std > 0 else np.zeros(w_out)
        layers.append((W, b))
    return flatten(model, layers)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.where(z > 0, z, 0.0)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _act_grad(name, z, h):
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        # subgradient at 0 is 0
        return (z > 0).astype(np.float64)
    if name == "sigmoid":
        return h * (1.0 - h)
    return np.ones_like(z)


def _dot_last(a, b):
    """``(a * b).sum(-1)`` with broadcasting; fixed, shape-independent rounding."""
    return np.multiply(a, b).sum(axis=-1)


def _prepare(model, theta, X):
    theta = np.asarray(theta, dtype=np.float64)
    single_theta = theta.ndim == 1
    if single_theta:
        theta = theta[None, :]
    if theta.ndim != 2:
        raise DimensionError("parameters must have shape (d,) or (P, d)")
    X = np.asarray(X, dtype=np.float64)
    single_x = X.ndim == 1
    if single_x:
        X = X[None, :]
    if X.ndim == 2:
        X = np.broadcast_to(X, (theta.shape[0],) + X.shape)
    if X.ndim != 3 or X.shape[0] != theta.shape[0]:
        raise DimensionError(f"inputs of shape {X.shape} do not match {theta.shape[0]} parameter vectors", layer=0)
    if X.shape[-1] != model.input_dim:
        raise DimensionError(
            f"layer 0 expects inputs of width {model.input_dim}, got {X.shape[-1]}", layer=0
        )
    return theta, X, single_theta, single_x


@np.errstate(over="ignore", invalid="ignore")
def _forward_cache(model, layers, X, check_finite):
    hs, zs = [X], []
    h = X
    for i, (W, b) in enumerate(layers):
        # h: (P, N, w_in), W: (P, w_out, w_in)
        z = _dot_last(h[:, :, None, :], W[:, None, :, :]) + b[:, None, :]
        h = _act(model.layer_activation(i), z)
        if check_finite and not np.all(np.isfinite(h)):
            raise NonFiniteError(f"non-finite activation in layer {i}", layer=i)
        zs.append(z)
        hs.append(h)
    return hs, zs


def _chunks(P, N, per_item):
    step = max(1, _CHUNK_ELEMS // max(per_item * N, 1))
    for s in range(0, P, step):
        yield slice(s, min(P, s + step))


def forward(model, theta, X, check_finite=True):
    """Network outputs.

    ``theta`` is ``(d,)`` or ``(P, d)``; ``X`` is ``(p,)``, ``(N, p)`` or
    ``(P, N, p)``.  Returns ``(..., N, m)`` with singleton axes dropped to
    match the inputs.
    """
    theta, Xb, st, sx = _prepare(model, theta, X)
    P, N = Xb.shape[:2]
    out = np.empty((P, N, model.output_dim))
    per = max(a * b for a, b in zip(model.layer_widths[:-1], model.layer_widths[1:]))
    for sl in _chunks(P, N, per):
        layers = unflatten(model, theta[sl])
        hs, _ = _forward_cache(model, layers, Xb[sl], check_finite)
        out[sl] = hs[-1]
    if sx:
        out = out[:, 0]
    if st:
        out = out[0]
    return out


@np.errstate(over="ignore", invalid="ignore")
def _backward(model, layers, hs, zs, coordinate):
    """Per-sample gradient of output ``coordinate``; returns (P, N, d)."""
    P, N = hs[0].shape[:2]
    grad = np.empty((P, N, model.n_params))
    segs = model.layout
    delta = np.zeros((P, N, model.output_dim))
    delta[..., coordinate] = 1.0
    for i in range(model.n_layers - 1, -1, -1):
        W, _ = layers[i]
        act = model.layer_activation(i)
        delta = delta * _act_grad(act, zs[i], hs[i + 1])
        sw, sb = segs[2 * i], segs[2 * i + 1]
        gW = delta[..., :, None] * hs[i][..., None, :]
        grad[..., sw.start:sw.stop] = gW.reshape(P, N, -1)
        grad[..., sb.start:sb.stop] = delta
        if i > 0:
            WT = np.ascontiguousarray(np.swapaxes(W, -1, -2))  # (P, w_in, w_out)
            delta = _dot_last(delta[:, :, None, :], WT[:, None, :, :])
    return grad


def forward_and_jacobian(model, theta, X, coordinate=0, check_finite=True):
    """Outputs ``(…, N, m)`` and per-sample gradients of one output coordinate ``(…, N, d)``."""
    if not 0 <= coordinate < model.output_dim:
        raise DimensionError(f"output coordinate {coordinate} out of range [0, {model.output_dim})")
    theta, Xb, st, sx = _prepare(model, theta, X)
    P, N = Xb.shape[:2]
    out = np.empty((P, N, model.output_dim))
    jac = np.empty((P, N, model.n_params))
    per = max(a * b for a, b in zip(model.layer_widths[:-1], model.layer_widths[1:]))
    for sl in _chunks(P, N, per):
        layers = unflatten(model, theta[sl])
        hs, zs = _forward_cache(model, layers, Xb[sl], check_finite)
        out[sl] = hs[-1]
        jac[sl] = _backward(model, layers, hs, zs, coordinate)
    if check_finite and not np.all(np.isfinite(jac)):
        raise NonFiniteError("non-finite gradient", layer=0)
    if sx:
        out, jac = out[:, 0], jac[:, 0]
    if st:
        out, jac = out[0], jac[0]
    return out, jac


def jacobian(model, theta, X, coordinate=0, check_finite=True):
    """Tangent features ``grad_theta f_coordinate(x, theta)`` for every input."""
    return forward_and_jacobian(model, theta, X, coordinate, check_finite)[1]


@dataclass(frozen=True)
class TangentFeature:
    values: np.ndarray
    output_coordinate: int = 0
    input_id: object = None
    step: int | None = None


def param_gradient(model, theta, x, output_coordinate=0, input_id=None, step=None):
    """Exact gradient of ``f_coordinate(x, theta)`` with respect to every parameter."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1:
        raise DimensionError("param_gradient takes a single parameter vector")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    g = jacobian(model, theta, x, output_coordinate)
    return TangentFeature(g, output_coordinate, input_id, step)


def left_fold_mean(rows, axis=-2):
    """Mean along ``axis`` accumulated strictly left to right.

    ``np.sum`` uses pairwise summation whose grouping depends on the length,
    so a batch mean computed that way would not equal the mean of the same
    per-sample terms accumulated one by one.  ``cumsum`` is sequential.
    """
    rows = np.asarray(rows)
    n = rows.shape[axis]
    if n == 0:
        raise ValueError("empty batch")
    total = np.take(np.cumsum(rows, axis=axis), -1, axis=axis)
    return total / n


@dataclass(frozen=True)
class SquaredError:
    """``l(f, y) = ||f - y||^2`` with mean reduction over the batch."""

    kind: str = "squared_error"
    reduction: str = "mean"

    def value(self, f, y):
        r = f - y
        return (r * r).sum(axis=-1)

    def dloss(self, f, y):
        return 2.0 * (f - y)


@dataclass
class LossGrad:
    loss: float | np.ndarray
    grad: np.ndarray
    per_sample_grads: np.ndarray = field(repr=False)
    per_sample_loss: np.ndarray = field(repr=False)
    outputs: np.ndarray = field(repr=False)


def _targets_like(Y, f):
    Y = np.asarray(Y, dtype=np.float64)
    if Y.size == f.shape[-2] * f.shape[-1]:
        return Y.reshape(f.shape[-2:])
    return Y.reshape(f.shape)


def per_sample_loss_grads(model, theta, X, Y, loss=SquaredError(), check_finite=True):
    """Per-sample losses ``(…, N)``, gradients ``(…, N, d)`` and outputs ``(…, N, m)``.

    ``X`` must carry an explicit sample axis.
    """
    G = f = Yb = None
    for c in range(model.output_dim):
        fc, Jc = forward_and_jacobian(model, theta, X, c, check_finite)
        f = fc
        Yb = _targets_like(Y, fc)
        dl = loss.dloss(fc, Yb)
        term = dl[..., c:c + 1] * Jc
        G = term if G is None else G + term
    return loss.value(f, Yb), G, f


def loss_and_grad(model, theta, X, Y, loss=SquaredError(), check_finite=True):
    """Mean loss and gradient over a batch, with the per-sample decomposition."""
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        raise ValueError("empty batch")
    if X.ndim == 1:
        X = X[None, :]
    ls, G, f = per_sample_loss_grads(model, theta, X, Y, loss, check_finite)
    lval = left_fold_mean(ls[..., None], axis=-2)[..., 0]
    g = left_fold_mean(G, axis=-2)
    if np.ndim(lval) == 0:
        lval = float(lval)
    return LossGrad(lval, g, G, ls, f)
