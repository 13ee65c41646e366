"""Discrete optimizer updates, uniform mini-batch sampling and the cosine schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

KINDS = ("gd", "sgd", "sgdm", "rmsprop", "adam")

# stream identifiers for the keyed generators
STREAM_BATCH = 1
STREAM_BROWNIAN = 2
STREAM_MISC = 3


def keyed_rng(seed, stream, counter=0, sub=0):
    """Counter-based generator keyed by ``(seed, stream)`` positioned at ``counter``.

    Philox advances the lowest counter word while drawing, so putting the
    step index in the second word keeps the streams of different steps
    disjoint.
    """
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream)], dtype=np.uint64)
    ctr = np.array([0, int(counter), int(sub), 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=ctr, key=key))


@dataclass(frozen=True)
class OptimizerConfig:
    """Hyperparameters of one training run.

    With ``schedule="cosine"`` the base rate ``eta`` is the minimum rate and
    the rate at step ``k`` is ``eta * cosine_weight(k * eta, steps * eta, kappa)``,
    so ``kappa = eta_max / eta_min``.
    """

    kind: str = "sgd"
    eta: float = 0.01
    steps: int = 100
    batch_size: int | None = None
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    schedule: str = "constant"
    kappa: float = 1.0
    adam_bias_correction: str = "standard"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.eta > 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        for name in ("beta", "beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.kappa < 1:
            raise ValueError("cosine ratio kappa must be >= 1")
        if self.adam_bias_correction not in ("standard", "recursive"):
            raise ValueError("adam_bias_correction must be 'standard' or 'recursive'")

    @property
    def mu(self):
        return (1.0 - self.beta) / self.eta

    @property
    def c1(self):
        return (1.0 - self.beta1) / self.eta

    @property
    def c2(self):
        return (1.0 - self.beta2) / self.eta

    @property
    def horizon(self):
        return self.steps * self.eta

    @property
    def eta_max(self):
        return self.eta * self.kappa

    def resolve_batch(self, n):
        if self.kind == "gd":
            return n
        B = n if self.batch_size is None else self.batch_size
        if B > n:
            raise ValueError(f"batch size {B} exceeds dataset size {n}")
        return B

    def step_eta(self, k):
        if self.schedule == "constant":
            return self.eta
        return self.eta * cosine_weight(k * self.eta, self.horizon, self.kappa)

    def derived(self):
        return {"mu": self.mu, "c1": self.c1, "c2": self.c2, "T": self.horizon}

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def with_(self, **kw):
        return replace(self, **kw)


def cosine_weight(t, T, kappa):
    """``1 + (kappa - 1) (1 + cos(pi t / T)) / 2``; equals ``kappa`` at 0 and 1 at ``T``."""
    if kappa == 1:
        return 1.0
    if T <= 0:
        return float(kappa)
    return 1.0 + 0.5 * (kappa - 1.0) * (1.0 + math.cos(math.pi * t / T))


@dataclass
class OptimizerState:
    """Parameters and moment buffers before step ``step``.

    Arrays may carry a leading run axis; ``momentum`` and ``second_moment``
    are ``None`` for optimizers that do not use them.
    """

    params: np.ndarray
    momentum: np.ndarray | None = None
    second_moment: np.ndarray | None = None
    step: int = 0

    def moments(self):
        out = {}
        if self.momentum is not None:
            out["momentum"] = self.momentum
        if self.second_moment is not None:
            out["second_moment"] = self.second_moment
        return out


def init_state(cfg, params):
    params = np.array(params, dtype=np.float64)
    m = np.zeros_like(params) if cfg.kind in ("sgdm", "adam") else None
    v = np.zeros_like(params) if cfg.kind in ("rmsprop", "adam") else None
    return OptimizerState(params, m, v, 0)


def step(cfg, state, batch_grad, per_step_eta=None, check_finite=True):
    """One update; returns a new :class:`OptimizerState` at ``step + 1``."""
    eta = cfg.step_eta(state.step) if per_step_eta is None else per_step_eta
    g = np.asarray(batch_grad, dtype=np.float64)
    theta = state.params
    m, v = state.momentum, state.second_moment
    k = state.step
    if cfg.kind in ("gd", "sgd"):
        theta = theta - eta * g
    elif cfg.kind == "sgdm":
        m = cfg.beta * m + g
        theta = theta - eta * m
    elif cfg.kind == "rmsprop":
        v = cfg.beta * v + (1.0 - cfg.beta) * (g * g)
        theta = theta - eta * g / (np.sqrt(v) + cfg.epsilon)
    else:
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1.0 - b1 ** (k + 1)
        c2 = 1.0 - b2 ** (k + 1)
        if cfg.adam_bias_correction == "standard":
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            theta = theta - eta * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        else:
            # correction folded into the stored averages at every step
            m = (b1 * m + (1.0 - b1) * g) / c1
            v = (b2 * v + (1.0 - b2) * (g * g)) / c2
            theta = theta - eta * m / (np.sqrt(v) + cfg.epsilon)
    if check_finite and not np.all(np.isfinite(theta)):
        raise FloatingPointError(f"non-finite parameters after step {k}")
    return OptimizerState(theta, m, v, k + 1)


@dataclass(frozen=True)
class BatchSampler:
    """Uniform size-``B`` subsets of ``range(N)``, i.i.d. across steps."""

    N: int
    B: int
    seed: int = 0
    mode: str = "uniform_subsets"

    def __post_init__(self):
        if self.B > self.N:
            raise ValueError(f"batch size {self.B} exceeds dataset size {self.N}")
        if self.B < 1:
            raise ValueError("batch size must be at least 1")


def sample_batch(sampler, k):
    """Sorted indices of the batch used at step ``k``; a pure function of ``(seed, k)``."""
    if sampler.B == sampler.N:
        return np.arange(sampler.N)
    rng = keyed_rng(sampler.seed, STREAM_BATCH, k)
    idx = rng.choice(sampler.N, size=sampler.B, replace=False)
    return np.sort(idx)
