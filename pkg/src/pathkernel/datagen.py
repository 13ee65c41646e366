"""Synthetic datasets: circle/disk and ellipse classification, 1-D regression, diffusion toy."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, p)
    targets: np.ndarray  # (N, m)
    name: str
    seed: int | None = None
    labels: np.ndarray | None = None  # optional class / level tags, (N,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs[:, None]
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if len(self.inputs) != len(self.targets) or len(self.inputs) < 1:
            raise ValueError("inputs and targets must be non-empty and of equal length")

    @property
    def n(self):
        return len(self.inputs)

    @property
    def p(self):
        return self.inputs.shape[1]

    @property
    def m(self):
        return self.targets.shape[1]

    def sidecar(self):
        return {"name": self.name, "seed": self.seed, "N": self.n, "p": self.p, "m": self.m,
                "has_labels": self.labels is not None, "meta": self.meta}


def _ring(n, rng):
    ang = rng.uniform(0.0, 2 * math.pi, size=n)
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _rejection(n, rng, inside, box):
    out = np.empty((0, 2))
    while len(out) < n:
        cand = rng.uniform(-1.0, 1.0, size=(2 * (n - len(out)) + 16, 2)) * box
        out = np.concatenate([out, cand[inside(cand)]])
    return out[:n]


def make_circle_disk(n_per_class=500, seed=0, r2_inner=0.8):
    """Unit circle labelled +1 and the disk ``x1^2 + x2^2 <= r2_inner`` labelled -1."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    circ = _ring(n_per_class, rng)
    r = math.sqrt(r2_inner)
    disk = _rejection(n_per_class, rng, lambda c: (c * c).sum(1) <= r2_inner, np.array([r, r]))
    X = np.concatenate([circ, disk])
    lab = np.concatenate([np.ones(n_per_class), -np.ones(n_per_class)])
    return Dataset(X, lab, "circle_disk", seed, lab.copy(), {"n_per_class": n_per_class, "r2_inner": r2_inner})


def make_ellipse_variant(n_per_class=500, seed=0, level_inner=0.9, a=100.0):
    """Ellipse ``a x1^2 + x2^2 = 1`` labelled +1 and its interior ``<= level_inner`` labelled -1."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    ring = _ring(n_per_class, rng)
    ring[:, 0] /= math.sqrt(a)
    box = np.array([math.sqrt(level_inner / a), math.sqrt(level_inner)])
    inner = _rejection(n_per_class, rng, lambda c: a * c[:, 0] ** 2 + c[:, 1] ** 2 <= level_inner, box)
    X = np.concatenate([ring, inner])
    lab = np.concatenate([np.ones(n_per_class), -np.ones(n_per_class)])
    return Dataset(X, lab, "ellipse", seed, lab.copy(), {"n_per_class": n_per_class, "a": a, "level_inner": level_inner})


def make_regression_1d(kind, n, seed=None, interval=None):
    """Regression on a uniform grid.

    ``sine``: ``sin(x)`` on ``interval`` (default ``[-pi, pi]``);
    ``square_wave``: ``sgn(sin(10 pi x))`` on ``[0, 1]``;
    ``linear_2x_plus_1``: ``x_n = n / 50`` for ``n = 0..N-1`` with target ``2x + 1``.
    A seed, if given, draws inputs uniformly from the interval instead of using the grid.
    """
    if n < 2:
        raise ValueError("need at least two points")
    if kind == "linear_2x_plus_1":
        x = np.arange(n) / 50.0
        return Dataset(x, 2 * x + 1, kind, None, meta={"grid": "n/50"})
    if kind == "sine":
        lo, hi = interval or (-math.pi, math.pi)
        f = np.sin
    elif kind == "square_wave":
        lo, hi = interval or (0.0, 1.0)
        f = lambda x: np.sign(np.sin(10 * math.pi * x))  # noqa: E731
    else:
        raise ValueError(f"unknown regression kind {kind!r}")
    if seed is None:
        x = np.linspace(lo, hi, n)
    else:
        x = np.sort(np.random.default_rng(seed).uniform(lo, hi, size=n))
    return Dataset(x, f(x), kind, seed, meta={"interval": [lo, hi]})


def sinusoidal_embedding(t, dim, max_period=10_000.0):
    """Transformer-style timestep embedding ``[sin(t w_j), cos(t w_j)]``."""
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    t = np.asarray(t, dtype=np.float64)
    freqs = max_period ** (-np.arange(dim // 2) / (dim // 2))
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def alpha_bar_schedule(T, start=1.0, stop=0.05):
    return np.linspace(start, stop, T)


def make_diffusion_toy(n_samples=64, n_timesteps=10, embed_dim=8, seed=0, max_period=10_000.0):
    """Noise-prediction pairs ``((x_t, gamma(t)), eps)`` from a two-mode 1-D mixture.

    Every base sample is noised at every level ``t = 0..T-1``; ``labels``
    holds the level index.
    """
    if n_timesteps < 2:
        raise ValueError("need at least two noise levels")
    rng = np.random.default_rng(seed)
    x0 = rng.choice([-1.0, 1.0], size=n_samples) + 0.1 * rng.standard_normal(n_samples)
    ab = alpha_bar_schedule(n_timesteps)
    eps = rng.standard_normal((n_timesteps, n_samples))
    xt = np.sqrt(ab)[:, None] * x0[None, :] + np.sqrt(1 - ab)[:, None] * eps
    t = np.repeat(np.arange(n_timesteps), n_samples)
    emb = sinusoidal_embedding(t.astype(float), embed_dim, max_period)
    X = np.concatenate([xt.reshape(-1, 1), emb], axis=1)
    meta = {"n_samples": n_samples, "T": n_timesteps, "embed_dim": embed_dim,
            "alpha_bar": ab.tolist(), "max_period": max_period, "x0": x0.tolist()}
    return Dataset(X, eps.reshape(-1), "diffusion_toy", seed, t, meta)


def save_dataset(ds, path):
    """Write ``<path>.csv`` (inputs then targets, full precision) and ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = [f"x{i}" for i in range(ds.p)] + [f"y{j}" for j in range(ds.m)]
    rows = np.concatenate([ds.inputs, ds.targets], axis=1)
    if ds.labels is not None:
        cols.append("label")
        rows = np.concatenate([rows, np.asarray(ds.labels, dtype=np.float64)[:, None]], axis=1)
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(ds.sidecar(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [path.with_suffix(".csv"), path.with_suffix(".json")]


def load_dataset(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    with open(path.with_suffix(".csv")) as fh:
        r = csv.reader(fh)
        next(r)
        rows = np.array([[float(v) for v in row] for row in r], dtype=np.float64).reshape(meta["N"], -1)
    p, m = meta["p"], meta["m"]
    labels = rows[:, p + m] if meta.get("has_labels") else None
    return Dataset(rows[:, :p], rows[:, p:p + m], meta["name"], meta["seed"], labels, meta.get("meta", {}))
