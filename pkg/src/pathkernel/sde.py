"""Euler-Maruyama simulation of the diffusion limits of SGD, SGDM, RMSprop and Adam.

All simulators advance ``P`` independent paths in lockstep; path ``j`` draws
its Brownian increments from a generator keyed by ``(seeds[j], k)`` where
``k`` indexes the learning-rate interval ``[k eta, (k + 1) eta)``.  Inside an
interval the increments are built coarse to fine by Brownian-bridge
halving, so halving ``dt`` with the same seed refines the same path.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import forward, loss_and_grad
from .kernels import matrix_sqrt_psd, noise_factor
from .optimizers import STREAM_BROWNIAN, STREAM_MISC, keyed_rng
from .trajectory import monte_carlo_runs


# --- objectives -------------------------------------------------------------------

class ModelObjective:
    """Full-batch loss of a model on a dataset with mini-batch noise of size ``batch_size``.

    ``sigma_mode``:
      ``exact``   finite-population covariance of the size-B subset mean,
                  factorised through the centred per-sample gradients;
      ``sqrt``    same covariance, symmetric square root by eigendecomposition;
      ``sampled`` covariance estimated from ``n_sample`` random batches per step;
      ``frozen_at_init`` the exact factor evaluated once at the first call;
      ``zero``    no noise.
    """

    def __init__(self, model, dataset, batch_size, sigma_mode="exact", n_sample=32):
        if sigma_mode not in ("exact", "sqrt", "sampled", "frozen_at_init", "zero"):
            raise ValueError(f"unknown sigma_mode {sigma_mode!r}")
        if not 1 <= batch_size <= dataset.n:
            raise ValueError("batch size outside [1, N]")
        self.model, self.dataset = model, dataset
        self.B = batch_size
        self.sigma_mode = sigma_mode
        self.n_sample = n_sample
        self._frozen = None

    def evaluate(self, Z, seeds=None, k=0):
        """Gradient ``(P, d)``, noise factor ``(P, d, r)`` (or ``None``) and ``diag(Sigma)``."""
        ds = self.dataset
        lg = loss_and_grad(self.model, Z, ds.inputs, ds.targets, check_finite=False)
        g, G = lg.grad, lg.per_sample_grads
        if self.sigma_mode == "zero" or self.B == ds.n:
            return g, None, np.zeros_like(g)
        if self.sigma_mode == "frozen_at_init":
            if self._frozen is None:
                self._frozen = noise_factor(G, self.B)
            L = np.broadcast_to(self._frozen, (Z.shape[0],) + self._frozen.shape[-2:])
        elif self.sigma_mode == "exact":
            L = noise_factor(G, self.B)
        elif self.sigma_mode == "sqrt":
            Lf = noise_factor(G, self.B)
            L = np.stack([matrix_sqrt_psd(l @ l.T) for l in Lf])
        else:
            L = self._sampled(G, seeds, k)
        diag = np.multiply(L, L).sum(-1)
        return g, L, diag

    def _sampled(self, G, seeds, k):
        P, N, _ = G.shape
        gbar = G.mean(axis=1)
        cols = []
        for p in range(P):
            rng = keyed_rng(seeds[p], STREAM_MISC, k)
            idx = np.stack([np.sort(rng.choice(N, self.B, replace=False)) for _ in range(self.n_sample)])
            cols.append((G[p][idx].mean(axis=1) - gbar[p]).T)
        return np.stack(cols) / math.sqrt(self.n_sample)

    def loss(self, Z):
        return loss_and_grad(self.model, Z, self.dataset.inputs, self.dataset.targets, check_finite=False).loss


class QuadraticObjective:
    """``L(z) = sum_i h_i z_i^2 / 2`` with constant noise.

    A scalar ``noise`` is a standard deviation (``Sigma = noise^2 I``); a
    matrix is taken as the covariance ``Sigma`` itself.
    """

    def __init__(self, hessian_diag, noise=0.0):
        self.h = np.atleast_1d(np.asarray(hessian_diag, dtype=np.float64))
        d = self.h.size
        noise = np.asarray(noise, dtype=np.float64)
        self.L = noise * np.eye(d) if noise.ndim == 0 else matrix_sqrt_psd(noise)

    def evaluate(self, Z, seeds=None, k=0):
        L = np.broadcast_to(self.L, (Z.shape[0],) + self.L.shape)
        return self.h * Z, L, np.broadcast_to(np.multiply(self.L, self.L).sum(-1), Z.shape)


class ConstantGradientObjective:
    """Gradient fixed at ``g`` everywhere and no noise (used for ODE limit checks)."""

    def __init__(self, g):
        self.g = np.atleast_1d(np.asarray(g, dtype=np.float64))

    def evaluate(self, Z, seeds=None, k=0):
        return np.broadcast_to(self.g, Z.shape).copy(), None, np.zeros_like(Z)


# --- Brownian increments ---------------------------------------------------------

def _odd_part(n):
    j = 0
    while n % 2 == 0:
        n //= 2
        j += 1
    return n, j


def brownian_increments(seed, k, n_sub, width, h):
    """``n_sub`` increments of a ``width``-dimensional Brownian motion over an interval of length ``h``.

    ``n_sub = n0 * 2**j`` with ``n0`` odd: ``n0`` coarse increments are drawn
    first, then ``j`` rounds of bridge halving, all from the stream keyed by
    ``(seed, k)``.  Doubling ``n_sub`` therefore refines the same path.
    """
    n0, j = _odd_part(n_sub)
    rng = keyed_rng(seed, STREAM_BROWNIAN, k)
    w = rng.standard_normal((n0, width)) * math.sqrt(h / n0)
    hh = h / n0
    for _ in range(j):
        xi = rng.standard_normal(w.shape) * math.sqrt(hh / 4)
        first = 0.5 * w + xi
        w = np.stack([first, w - first], axis=1).reshape(-1, width)
        hh /= 2
    return w


def _increments(seeds, k, n_sub, width, h):
    return np.stack([brownian_increments(s, k, n_sub, width, h) for s in seeds], axis=1)  # (n_sub, P, r)


def _apply(L, dW):
    return np.multiply(L, dW[:, None, :]).sum(-1)


# --- simulators -------------------------------------------------------------------

@dataclass
class SdePath:
    """Recorded states at ``times`` for ``P`` paths: ``Z`` has shape ``(P, n_times, d)``."""

    times: np.ndarray
    Z: np.ndarray
    aux: dict = field(default_factory=dict)  # final M / S / V
    clamp_count: int = 0
    diverged: np.ndarray | None = None
    kind: str = "sgd"
    dt: float = 0.0


def _setup(theta0, eta, T, dt, seeds):
    if dt is None:
        dt = eta / 5
    if dt > eta * (1 + 1e-12):
        raise ValueError("dt must not exceed the learning rate")
    n_sub = int(round(eta / dt))
    if abs(n_sub * dt - eta) > 1e-9 * eta:
        raise ValueError("dt must divide the learning rate")
    K = int(round(T / eta))
    if abs(K * eta - T) > 1e-9 * max(T, eta):
        raise ValueError("horizon T must be a whole number of learning-rate intervals")
    seeds = np.atleast_1d(np.asarray(seeds, dtype=np.int64))
    Z = np.broadcast_to(np.asarray(theta0, dtype=np.float64), (len(seeds), np.size(theta0))).copy()
    return eta / n_sub, n_sub, K, seeds, Z


def _simulate(kind, objective, theta0, eta, T, dt, seeds, noise, rates, record="eta", m0=None):
    if record not in ("eta", "dt"):
        raise ValueError("record must be 'eta' or 'dt'")
    h, n_sub, K, seeds, Z = _setup(theta0, eta, T, dt, seeds)
    P, d = Z.shape
    M = np.zeros_like(Z) if m0 is None else np.broadcast_to(np.asarray(m0, dtype=np.float64), Z.shape).copy()
    S = np.zeros_like(Z)
    out = [Z.copy()]
    times = [0.0]
    clamps = 0
    dead = np.zeros(P, dtype=bool)
    eps = rates.get("epsilon", 1e-8)
    with np.errstate(all="ignore"):
        for k in range(K):
            dWs = None
            for j in range(n_sub):
                n = k * n_sub + j
                g, L, dg = objective.evaluate(Z, seeds, n)
                if noise and L is not None:
                    if dWs is None:
                        dWs = _increments(seeds, k, n_sub, L.shape[-1], eta)
                    dn = math.sqrt(eta) * _apply(L, dWs[j])
                else:
                    dn = None
                if kind == "sgd":
                    Z = Z - h * g if dn is None else Z - h * g + dn
                elif kind == "sgdm":
                    mu = rates["mu"]
                    Z = Z + (h / eta) * M
                    M = M - h * (mu * M + g) if dn is None else M - h * (mu * M + g) + dn
                elif kind == "rmsprop":
                    mu = rates["mu"]
                    S = S + h * mu * (g * g + dg - S)
                    neg = S < 0
                    clamps += int(neg.sum())
                    S = np.where(neg, 0.0, S)
                    Pd = np.sqrt(S) + eps
                    Z = Z - h * g / Pd if dn is None else Z - (h * g + dn) / Pd
                else:  # adam
                    c1, c2 = rates["c1"], rates["c2"]
                    t = (n + 1) * h  # drift is first evaluated at t = dt
                    M = M - h * c1 * (M - g) if dn is None else M - h * c1 * (M - g) + c1 * dn
                    V = S + h * c2 * (dg + g * g - S)
                    neg = V < 0
                    clamps += int(neg.sum())
                    S = np.where(neg, 0.0, V)
                    e2 = -math.expm1(-c2 * t)
                    A = math.sqrt(e2) / (-math.expm1(-c1 * t))
                    Pd = np.sqrt(S) + eps * math.sqrt(e2)
                    Z = Z - h * A * (M + eta * c1 * (g - M)) / Pd
                dead |= ~np.all(np.isfinite(Z), axis=1)
                if record == "dt" and j < n_sub - 1:
                    out.append(Z.copy())
                    times.append(k * eta + (j + 1) * h)
            out.append(Z.copy())
            times.append((k + 1) * eta)
    aux = {"M": M} if kind in ("sgdm", "adam") else {}
    if kind == "rmsprop":
        aux["S"] = S
    if kind == "adam":
        aux["V"] = S
    return SdePath(np.array(times), np.stack(out, axis=1), aux, clamps, dead, kind, h)


def simulate_sgd_sde(objective, theta0, eta, T, dt=None, seeds=0, noise=True, record="eta"):
    """``dZ = -grad L dt + sqrt(eta) Sigma^{1/2} dW``, recorded at multiples of ``eta`` (or of ``dt``)."""
    return _simulate("sgd", objective, theta0, eta, T, dt, seeds, noise, {}, record)


def simulate_sgdm_sde(objective, theta0, eta, T, beta, dt=None, seeds=0, noise=True, m0=None):
    """Momentum diffusion ``dM = -(mu M + grad L) dt + sqrt(eta) Sigma^{1/2} dW``, ``dZ = (M / eta) dt``.

    With the heavy-ball update ``m <- beta m + g``, ``theta <- theta - eta m``
    the variable ``M`` tracks ``-eta m``; the ``1/eta`` in the position
    equation converts it back to a velocity per unit of time ``t = k eta``.
    """
    return _simulate("sgdm", objective, theta0, eta, T, dt, seeds, noise, {"mu": (1 - beta) / eta}, m0=m0)


def simulate_rmsprop_sde(objective, theta0, eta, T, beta, epsilon=1e-8, dt=None, seeds=0, noise=True):
    """``dS = mu (grad L^2 + diag Sigma - S) dt``, ``dZ = -P^{-1}(grad L dt + sqrt(eta) Sigma^{1/2} dW)``.

    ``S`` is advanced first and the new value enters ``P = sqrt(S) + eps``
    in the same sub-step, mirroring the discrete update.
    """
    return _simulate("rmsprop", objective, theta0, eta, T, dt, seeds, noise,
                     {"mu": (1 - beta) / eta, "epsilon": epsilon})


def simulate_adam_sde(objective, theta0, eta, T, beta1, beta2, epsilon=1e-8, dt=None, seeds=0, noise=True):
    """Adam diffusion with the ``sqrt(1 - e^{-c2 t}) / (1 - e^{-c1 t})`` prefactor.

    ``M`` and ``V`` are advanced first; the position drift then uses them at
    time ``t + dt`` so the singular prefactor is never evaluated at 0.
    """
    return _simulate("adam", objective, theta0, eta, T, dt, seeds, noise,
                     {"c1": (1 - beta1) / eta, "c2": (1 - beta2) / eta, "epsilon": epsilon})


# --- closed-form checks ----------------------------------------------------------

def ou_check(theta0=1.0, sigma=1.0, eta=0.1, T=1.0, dt=1e-3, n_paths=10_000, seed=0, z_crit=3.0):
    """Compare simulated ``Z_T`` for ``L = z^2/2`` with the Ornstein-Uhlenbeck law."""
    obj = QuadraticObjective([1.0], sigma)
    n_sub = int(round(eta / dt))
    seeds = seed * 1_000_003 + np.arange(n_paths)
    path = simulate_sgd_sde(obj, [theta0], eta, T, dt=eta / n_sub, seeds=seeds)
    z = path.Z[:, -1, 0]
    mean_th = theta0 * math.exp(-T)
    var_th = eta * sigma ** 2 * (1 - math.exp(-2 * T)) / 2
    mean_se = math.sqrt(var_th / n_paths)
    var_se = var_th * math.sqrt(2.0 / (n_paths - 1))
    zm = (z.mean() - mean_th) / mean_se
    zv = (z.var(ddof=1) - var_th) / var_se
    return {"mean": float(z.mean()), "mean_expected": mean_th, "mean_z": float(zm),
            "var": float(z.var(ddof=1)), "var_expected": var_th, "var_z": float(zv),
            "passed": bool(abs(zm) <= z_crit and abs(zv) <= z_crit)}


# --- weak order ----------------------------------------------------------------

@dataclass
class WeakOrderReport:
    test_functions: list
    eta_grid: list
    gaps: list
    stderrs: list
    argmax_steps: list
    slope: float
    slope_ci: tuple
    inconclusive: bool
    noise_floor: list
    n_seeds: int
    T: float
    dt_fraction: int
    sigma_mode: str
    trajectory_kind: str = "discrete vs euler-maruyama"

    def to_json(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        d = asdict(self)
        d["slope_ci"] = list(self.slope_ci)
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["eta", "gap", "stderr", "noise_floor"])
            for row in zip(self.eta_grid, self.gaps, self.stderrs, self.noise_floor):
                w.writerow([repr(float(v)) for v in row])


def _fit_slope(etas, gaps):
    x, y = np.log(etas), np.log(np.maximum(gaps, 1e-300))
    return float(np.polyfit(x, y, 1)[0])


def _gap_stats(obs_d, obs_s):
    md, ms = obs_d.mean(0), obs_s.mean(0)
    diff = np.abs(md - ms)  # (K+1, n_test)
    flat = int(np.argmax(diff))
    k, j = np.unravel_index(flat, diff.shape)
    n_d, n_s = obs_d.shape[0], obs_s.shape[0]
    se = math.sqrt(obs_d[:, k, j].var(ddof=1) / n_d + obs_s[:, k, j].var(ddof=1) / n_s)
    # expected size of the largest pure-noise deviation over the recorded grid
    se_all = np.sqrt(obs_d.var(0, ddof=1) / n_d + obs_s.var(0, ddof=1) / n_s)
    floor = float(se_all.max() * math.sqrt(2 * math.log(max(diff.size, 2))))
    return float(diff[k, j]), se, int(k), floor


def weak_order_test(model, dataset, cfg, theta0, test_points, eta_grid, n_seeds, T=1.0, n_sub=5,
                    sigma_mode="exact", n_boot=200, boot_seed=0, z_gate=3.0, threads=1):
    """Expectation gap between SGD iterates and the SGD diffusion for ``g(theta) = f(x, theta)``."""
    eta_grid = [float(e) for e in eta_grid]
    if len(eta_grid) < 3 or any(a <= b for a, b in zip(eta_grid, eta_grid[1:])):
        raise ValueError("eta grid must be strictly decreasing with at least 3 values")
    X = np.atleast_2d(np.asarray(test_points, dtype=np.float64))
    B = cfg.resolve_batch(dataset.n)
    obj = ModelObjective(model, dataset, B, sigma_mode)
    all_obs = []
    gaps, ses, ks, floors = [], [], [], []
    for eta in eta_grid:
        K = int(round(T / eta))
        c = cfg.with_(kind="sgd", eta=eta, steps=K)
        recs = monte_carlo_runs(model, dataset, c, n_seeds, theta0, record_stride=1, threads=threads)
        obs_d = forward(model, np.stack([r.params for r in recs]).reshape(-1, model.n_params), X)
        obs_d = obs_d[..., 0].reshape(n_seeds, K + 1, len(X))
        seeds = 10_000_019 + cfg.seed + np.arange(n_seeds)
        path = simulate_sgd_sde(obj, theta0, eta, T, dt=eta / n_sub, seeds=seeds)
        obs_s = forward(model, path.Z.reshape(-1, model.n_params), X)[..., 0].reshape(n_seeds, K + 1, len(X))
        gap, se, k, floor = _gap_stats(obs_d, obs_s)
        gaps.append(gap)
        ses.append(se)
        ks.append(k)
        floors.append(floor)
        all_obs.append((obs_d, obs_s))
    slope = _fit_slope(eta_grid, gaps)
    rng = np.random.default_rng(boot_seed)
    boots = []
    for _ in range(n_boot):
        bg = []
        for obs_d, obs_s in all_obs:
            i = rng.integers(0, n_seeds, n_seeds)
            j = rng.integers(0, n_seeds, n_seeds)
            bg.append(float(np.abs(obs_d[i].mean(0) - obs_s[j].mean(0)).max()))
        boots.append(_fit_slope(eta_grid, bg))
    ci = (float(np.percentile(boots, 2.5)), float(np.percentile(boots, 97.5)))
    inconclusive = any(g < max(z_gate * s, f) for g, s, f in zip(gaps, ses, floors))
    names = [f"f(x={list(map(float, x))})" for x in X]
    return WeakOrderReport(names, eta_grid, gaps, ses, ks, slope, ci, inconclusive, floors, n_seeds, T, n_sub,
                           sigma_mode)
