"""Gradient kernels, path-kernel quadrature, preconditioners and mini-batch noise covariance."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .autodiff import jacobian, per_sample_loss_grads
from .optimizers import STREAM_MISC, cosine_weight, keyed_rng

_BLOCK_ELEMS = 1 << 22
MAX_ENUMERATION = 1_000_000


@dataclass
class KernelMatrix:
    values: np.ndarray
    step_t: int | None = None
    step_s: int | None = None
    weighting: str = "plain"
    zero_norm: np.ndarray | None = None  # bool mask of entries forced to 0 by normalisation
    trajectory_kind: str = "discrete"
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.values.shape


def gram(A, B=None):
    """``A @ B.T`` accumulated row block by row block without BLAS.

    Entry ``(i, j)`` is always ``sum(A[i] * B[j])`` reduced along the
    parameter axis, so it does not depend on how many rows are computed
    together.  When ``B`` is omitted only the upper triangle is formed and
    mirrored, which makes the result exactly symmetric.
    """
    A = np.asarray(A, dtype=np.float64)
    sym = B is None
    B = A if sym else np.asarray(B, dtype=np.float64)
    n, m, d = A.shape[0], B.shape[0], A.shape[1]
    if B.shape[1] != d:
        raise ValueError("feature dimensions differ")
    out = np.empty((n, m))
    rows = max(1, _BLOCK_ELEMS // max(m * d, 1))
    for s in range(0, n, rows):
        e = min(n, s + rows)
        if sym:
            out[s:e, s:] = np.multiply(A[s:e, None, :], B[None, s:, :]).sum(-1)
        else:
            out[s:e] = np.multiply(A[s:e, None, :], B[None, :, :]).sum(-1)
    if sym:
        iu = np.triu_indices(n, 1)
        out[iu[1], iu[0]] = out[iu]
    return out


def kernel_from_features(Fx, Fy=None, pdiag=None, normalize=False):
    """Kernel between feature rows, optionally in the ``P^{-1}`` metric and normalised.

    Returns ``(values, zero_norm_mask)``.
    """
    Fx = np.asarray(Fx, dtype=np.float64)
    same = Fy is None
    Fy_ = Fx if same else np.asarray(Fy, dtype=np.float64)
    Wx = Fx if pdiag is None else Fx / pdiag
    if same and pdiag is None:
        K = gram(Fx)
    else:
        K = gram(Wx, Fy_)
    mask = None
    if normalize:
        nx = np.multiply(Wx, Fx).sum(-1)
        ny = nx if same else (np.multiply(Fy_ if pdiag is None else Fy_ / pdiag, Fy_).sum(-1))
        den = np.sqrt(nx[:, None] * ny[None, :])
        mask = den == 0
        with np.errstate(invalid="ignore", divide="ignore"):
            K = np.where(mask, 0.0, K / np.where(mask, 1.0, den))
        if same:
            nz = nx > 0
            K[np.diag_indices_from(K)] = np.where(nz, 1.0, 0.0)
    return K, mask


@dataclass
class Preconditioner:
    diag: np.ndarray
    step: int
    source: str  # "rmsprop" or "adam"
    timing: str = "state"


def build_preconditioner(record, step, optimizer_kind=None, epsilon=None, timing="state"):
    """Diagonal preconditioner from the recorded second moment.

    ``timing="state"`` uses the buffer entering step ``step``;
    ``timing="applied"`` uses the buffer produced by that step, i.e. the one
    the update actually divided by.  RMSprop gives ``sqrt(s) + eps``.  Adam
    gives ``sqrt(v) + eps * sqrt(1 - exp(-c2 t))`` with the raw (uncorrected)
    running average ``v``; the time ``t`` is ``k * eta`` for the entering
    buffer and ``(k + 1) * eta`` for the produced one.
    """
    cfg = record.config
    kind = optimizer_kind or cfg.kind
    eps = cfg.epsilon if epsilon is None else epsilon
    if kind not in ("rmsprop", "adam"):
        raise ValueError(f"no preconditioner for optimizer {kind!r}")
    i = record.index_of(step)
    store = record.state if timing == "state" else record.applied
    if "second_moment" not in store:
        raise KeyError("record holds no second-moment state")
    v = np.asarray(store["second_moment"][i])
    if np.any(np.isnan(v)):
        raise KeyError(f"no {timing} second moment stored at step {step}")
    if kind == "rmsprop":
        diag = np.sqrt(v) + eps
    else:
        t = (step + (timing == "applied")) * cfg.eta
        diag = np.sqrt(v) + eps * math.sqrt(-math.expm1(-cfg.c2 * t))
        if not np.all(diag > 0):
            raise ValueError(f"Adam preconditioner is singular at t={t}")
    return Preconditioner(diag, step, kind, timing)


def _features(record, step, X, coordinate=0):
    return jacobian(record.model, record.params[record.index_of(step)], np.atleast_2d(X), coordinate)


def gradient_kernel(record, step_t, xs, ys=None, step_s=None, weighting="plain", preconditioner=None,
                    coordinate=0):
    """Kernel ``<grad f(x_i, theta_t), grad f(y_j, theta_s)>`` over recorded snapshots.

    ``weighting`` is ``plain``, ``normalized``, ``preconditioned`` or
    ``preconditioned_normalized``.  The preconditioner defaults to the one
    built at ``step_t``.
    """
    step_s = step_t if step_s is None else step_s
    Fx = _features(record, step_t, xs, coordinate)
    same = ys is None and step_s == step_t
    Fy = None if same else _features(record, step_s, xs if ys is None else ys, coordinate)
    pdiag = None
    if weighting.startswith("preconditioned"):
        P = preconditioner or build_preconditioner(record, step_t)
        pdiag = P.diag
    K, mask = kernel_from_features(Fx, Fy, pdiag, normalize=weighting.endswith("normalized"))
    return KernelMatrix(K, step_t, step_s, weighting, mask)


def _schedule_weights(record, times, schedule_weight):
    if schedule_weight is None or schedule_weight is False:
        return np.ones_like(times)
    if callable(schedule_weight):
        return np.array([schedule_weight(t) for t in times])
    cfg = record.config
    if cfg.schedule != "cosine":
        return np.ones_like(times)
    return np.array([cosine_weight(t, cfg.horizon, cfg.kappa) for t in times])


def quadrature_weights(times, quadrature="left_riemann"):
    times = np.asarray(times, dtype=np.float64)
    dt = np.diff(times)
    w = np.zeros_like(times)
    if quadrature == "left_riemann":
        w[:-1] = dt
    elif quadrature == "trapezoid":
        w[:-1] += dt / 2
        w[1:] += dt / 2
    else:
        raise ValueError(f"unknown quadrature {quadrature!r}")
    return w


def path_kernel(record, xs, ys=None, quadrature="left_riemann", schedule_weight="auto", coordinate=0):
    """Time integral of the gradient kernel over the recorded snapshots.

    With ``schedule_weight="auto"`` a cosine-scheduled run is weighted by
    its ``w(t)``; pass ``None`` to integrate unweighted or a callable.
    """
    if record.n_snapshots < 2:
        raise ValueError("path kernel needs at least two snapshots")
    times = record.times
    q = quadrature_weights(times, quadrature) * _schedule_weights(record, times, schedule_weight)
    total = None
    for i, k in enumerate(record.steps):
        if q[i] == 0:
            continue
        K = gradient_kernel(record, int(k), xs, ys, coordinate=coordinate).values
        total = q[i] * K if total is None else total + q[i] * K
    return KernelMatrix(total, int(record.steps[0]), int(record.steps[-1]), f"path:{quadrature}")


# --- mini-batch noise -----------------------------------------------------------

@dataclass
class BatchNoiseCovariance:
    matrix: np.ndarray
    batch_size: int
    mode: str
    stderr: np.ndarray | None = None
    n_draws: int | None = None


def finite_population_factor(N, B):
    """``(N - B) / (B (N - 1))``: variance of a size-B subset mean relative to the per-sample variance."""
    if N == 1:
        return 0.0
    return (N - B) / (B * (N - 1))


def noise_factor(per_sample_grads, B):
    """``L`` with ``L @ L.T`` equal to the mini-batch covariance; shape ``(..., d, N)``."""
    G = np.asarray(per_sample_grads, dtype=np.float64)
    N = G.shape[-2]
    C = G - G.mean(axis=-2, keepdims=True)
    return np.sqrt(finite_population_factor(N, B) / N) * np.swapaxes(C, -1, -2)


def noise_covariance_from_grads(per_sample_grads, B, mode="analytic", n_draws=10_000, seed=0):
    G = np.asarray(per_sample_grads, dtype=np.float64)
    N, d = G.shape
    if not 1 <= B <= N:
        raise ValueError(f"batch size {B} outside [1, {N}]")
    gbar = G.mean(axis=0)
    if mode == "analytic":
        L = noise_factor(G, B)
        return BatchNoiseCovariance(L @ L.T, B, mode)
    if mode == "exact":
        n_sub = math.comb(N, B)
        if n_sub > MAX_ENUMERATION:
            raise ValueError(f"C({N},{B}) = {n_sub} subsets exceeds {MAX_ENUMERATION}; use mode='sample'")
        S = np.zeros((d, d))
        it = combinations(range(N), B)
        while True:
            chunk = np.array([c for _, c in zip(range(50_000), it)], dtype=np.int64)
            if chunk.size == 0:
                break
            D = G[chunk].mean(axis=1) - gbar
            S += D.T @ D
        return BatchNoiseCovariance(S / n_sub, B, mode)
    if mode == "sample":
        rng = keyed_rng(seed, STREAM_MISC)
        D = np.stack([G[rng.choice(N, B, replace=False)].mean(axis=0) - gbar for _ in range(n_draws)])
        outer = D[:, :, None] * D[:, None, :]
        return BatchNoiseCovariance(outer.mean(0), B, mode, outer.std(0, ddof=1) / math.sqrt(n_draws), n_draws)
    raise ValueError(f"unknown mode {mode!r}")


def batch_noise_covariance(model, dataset, params, B, mode="exact", n_draws=10_000, seed=0):
    """Covariance of the mini-batch gradient around the full gradient at ``params``."""
    _, G, _ = per_sample_loss_grads(model, params, dataset.inputs, dataset.targets)
    return noise_covariance_from_grads(G, B, mode, n_draws, seed)


def matrix_sqrt_psd(S, tol=1e-10):
    """Symmetric square root of a PSD matrix; small negative eigenvalues are clamped."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("matrix must be square")
    scale = max(np.abs(S).max(), 1e-300)
    if np.abs(S - S.T).max() > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    lam, V = np.linalg.eigh(S)
    floor = -tol * max(np.trace(S), 0.0)
    if lam.min(initial=0.0) < floor - 1e-300:
        raise ValueError(f"matrix has eigenvalue {lam.min():.3g} below PSD tolerance")
    R = (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T
    return 0.5 * (R + R.T)


# --- export ---------------------------------------------------------------------

def save_kernel_csv(K, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vals = K.values if isinstance(K, KernelMatrix) else np.asarray(K)
    with open(path, "w") as fh:
        for row in vals:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return path


def save_kernel_pgm(K, path, normalized=None):
    """8-bit grayscale heatmap plus a JSON sidecar describing the value mapping."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vals = K.values if isinstance(K, KernelMatrix) else np.asarray(K)
    if normalized is None:
        normalized = isinstance(K, KernelMatrix) and "normalized" in K.weighting
    lo, hi = (-1.0, 1.0) if normalized else (float(vals.min()), float(vals.max()))
    span = hi - lo if hi > lo else 1.0
    img = np.clip(np.rint((vals - lo) / span * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
    side = path.with_suffix(".json")
    side.write_text(json.dumps({"min": lo, "max": hi, "mapping": "linear", "rows": h, "cols": w,
                                "normalized": bool(normalized)}, indent=2, sort_keys=True) + "\n")
    return [path, side]
