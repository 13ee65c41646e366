"""Tangent-geometry diagnostics: rank gap, kernel neighbours, CKA, null-space residual, margins, PCA."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .autodiff import ModelSpec, flatten, forward, init_params, jacobian, unflatten
from .kernels import gram, kernel_from_features
from .optimizers import STREAM_MISC, keyed_rng
from .trajectory import monte_carlo_runs


def _write_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- rank gap ----------------------------------------------------------------------

def tangent_matrix(model, theta, X, coordinate=0):
    """``d x n`` matrix whose columns are the tangent features of the rows of ``X``."""
    return jacobian(model, theta, np.atleast_2d(X), coordinate).T


def numerical_rank(M, rule="relative", tol=1e-8):
    """Rank from singular values: ``s_i > tol * s_1`` (relative) or ``s_i > tol`` (absolute)."""
    M = np.asarray(M, dtype=np.float64)
    if M.size == 0:
        return 0, np.zeros(0)
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0, s
    cut = tol * s[0] if rule == "relative" else tol
    if rule not in ("relative", "absolute"):
        raise ValueError(f"unknown tolerance rule {rule!r}")
    return int(np.sum(s > cut)), s


@dataclass
class RankReport:
    steps: list
    rank_empirical: list
    rank_mixture: list
    gap: list
    singular_values_empirical: list
    singular_values_mixture: list
    tolerance: tuple
    test_loss: list = field(default_factory=list)
    oracle_rank_empirical: list = field(default_factory=list)
    oracle_rank_mixture: list = field(default_factory=list)

    @property
    def oracle_agrees(self):
        if not self.oracle_rank_empirical:
            return None
        return (self.oracle_rank_empirical == self.rank_empirical
                and self.oracle_rank_mixture == self.rank_mixture)

    def to_json(self, path):
        d = asdict(self)
        d["oracle_agrees"] = self.oracle_agrees
        _write_json(d, path)

    def to_csv(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "rank_empirical", "rank_mixture", "gap", "test_loss"])
            for i, k in enumerate(self.steps):
                tl = repr(float(self.test_loss[i])) if self.test_loss else ""
                w.writerow([k, self.rank_empirical[i], self.rank_mixture[i], self.gap[i], tl])


def rank_gap(record, train_points, test_points, steps=None, rule="relative", tol=1e-8, test_targets=None,
             oracle=False):
    """``rank(mixture) - rank(empirical)`` of the tangent matrices along a record.

    With ``oracle=True`` (single-hidden-layer ReLU nets with scalar input
    only) the exact rank from ``relu_exact_rank`` is reported alongside.
    """
    model = record.model
    Xtr = np.atleast_2d(np.asarray(train_points, dtype=np.float64))
    Xte = np.atleast_2d(np.asarray(test_points, dtype=np.float64))
    if Xtr.shape[0] == 1 and Xtr.shape[1] != model.input_dim:
        Xtr = Xtr.T
    if Xte.shape[0] == 1 and Xte.shape[1] != model.input_dim:
        Xte = Xte.T
    steps = list(record.steps) if steps is None else list(steps)
    Xmix = np.concatenate([Xtr, Xte])
    rep = RankReport([], [], [], [], [], [], (rule, tol))
    for k in steps:
        th = record.params[record.index_of(int(k))]
        re, se = numerical_rank(tangent_matrix(model, th, Xtr), rule, tol)
        rm, sm = numerical_rank(tangent_matrix(model, th, Xmix), rule, tol)
        rep.steps.append(int(k))
        rep.rank_empirical.append(re)
        rep.rank_mixture.append(rm)
        rep.gap.append(rm - re)
        rep.singular_values_empirical.append(se.tolist())
        rep.singular_values_mixture.append(sm.tolist())
        if test_targets is not None:
            r = forward(model, th, Xte) - np.asarray(test_targets, dtype=np.float64).reshape(len(Xte), -1)
            rep.test_loss.append(float(np.mean(np.sum(r * r, axis=1))))
        if oracle:
            rep.oracle_rank_empirical.append(relu_exact_rank(model, th, Xtr[:, 0]))
            rep.oracle_rank_mixture.append(relu_exact_rank(model, th, Xmix[:, 0]))
    return rep


def _exact_rank(rows):
    """Rank of a list of equal-length Fraction vectors by exact Gaussian elimination."""
    basis = []  # (pivot, row) in reduced form
    for r in rows:
        r = list(r)
        for p, b in basis:
            if r[p] != 0:
                f = r[p] / b[p]
                r = [x - f * y for x, y in zip(r, b)]
        nz = next((i for i, x in enumerate(r) if x != 0), None)
        if nz is not None:
            basis.append((nz, r))
    return len(basis)


def relu_exact_rank(model, theta, xs):
    """Exact rank of the tangent matrix of ``f(x) = sum_i a_i relu(w_i x + c_i) + c`` at real inputs ``xs``.

    All float parameters and inputs are converted to exact rationals.  On
    each activation pattern the tangent feature is affine in ``x``, so the
    inputs sharing a pattern span the pattern's slope and offset vectors
    (or just the single feature when only one distinct input has that
    pattern).  The rank of the union of these generators is computed exactly.
    """
    if model.n_layers != 2 or model.input_dim != 1 or model.output_dim != 1 or model.activations[0] != "relu":
        raise ValueError("exact oracle covers one-hidden-layer ReLU nets with scalar input and output")
    (W1, b1), (W2, b2) = unflatten(model, theta)
    m = W1.shape[0]
    w = [Fraction(float(v)) for v in W1[:, 0]]
    c = [Fraction(float(v)) for v in b1]
    a = [Fraction(float(v)) for v in W2[0]]

    def vec(pattern, slope):
        # parameter order follows the flat layout: W1 (m), b1 (m), W2 (m), b2 (1)
        gW1, gb1, gW2 = [Fraction(0)] * m, [Fraction(0)] * m, [Fraction(0)] * m
        for i in range(m):
            if pattern[i]:
                gW1[i] = a[i] if slope else Fraction(0)
                gb1[i] = Fraction(0) if slope else a[i]
                gW2[i] = w[i] if slope else c[i]
        gb2 = [Fraction(0) if slope else Fraction(1)]
        return gW1 + gb1 + gW2 + gb2

    groups = {}
    for x in sorted(set(float(v) for v in xs)):
        xf = Fraction(x)
        pat = tuple(w[i] * xf + c[i] > 0 for i in range(m))
        groups.setdefault(pat, []).append(xf)
    rows = []
    for pat, pts in groups.items():
        u, v = vec(pat, True), vec(pat, False)
        if len(pts) >= 2:
            rows += [u, v]
        else:
            rows.append([pts[0] * p + q for p, q in zip(u, v)])
    return _exact_rank(rows)


def relu_rankgap_model(biases, seed=0, a_scale=1.0):
    """``[1, m, 1]`` ReLU net with unit input weights and hidden pre-activation ``x - b_i``."""
    m = len(biases)
    model = ModelSpec((1, m, 1), ("relu",))
    (W1, b1), (W2, b2) = unflatten(model, init_params(model, seed))
    W1 = np.ones_like(W1)
    b1 = -np.asarray(biases, dtype=np.float64)
    W2 = W2 * a_scale
    b2 = np.zeros_like(b2)
    return model, flatten(model, [(W1, b1), (W2, b2)])


# --- kernel neighbours ---------------------------------------------------------------

@dataclass
class NeighborReport:
    step: int
    k: int
    anchors: list
    anchor_labels: list
    kernel_neighbors: list
    euclidean_neighbors: list
    kernel_homogeneity: list
    euclidean_homogeneity: list
    zero_gradient_anchor: list

    def to_json(self, path):
        _write_json(asdict(self), path)


def _topk(scores, k):
    # stable: ties broken by candidate index
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:k]


def kernel_neighbors(record, step, anchors, candidates, labels, k=100, anchor_labels=None):
    """Top-``k`` candidates by normalised kernel and by Euclidean distance, with label homogeneity.

    An anchor's label is its nearest candidate's label unless given.
    """
    A = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    C = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    labels = np.asarray(labels)
    if k > len(C):
        raise ValueError("k exceeds the number of candidates")
    th = record.params[record.index_of(step)]
    JA, JC = jacobian(record.model, th, A), jacobian(record.model, th, C)
    K, mask = kernel_from_features(JA, JC, normalize=True)
    D = np.sqrt(np.maximum(
        np.multiply(A, A).sum(1)[:, None] + np.multiply(C, C).sum(1)[None, :] - 2 * gram(A, C), 0.0))
    if anchor_labels is None:
        anchor_labels = labels[np.argmin(D, axis=1)]
    kn, en, kh, eh, zero = [], [], [], [], []
    for i in range(len(A)):
        ki = _topk(K[i], k)
        ei = _topk(-D[i], k)
        kn.append(ki.tolist())
        en.append(ei.tolist())
        kh.append(float(np.mean(labels[ki] == anchor_labels[i])))
        eh.append(float(np.mean(labels[ei] == anchor_labels[i])))
        zero.append(bool(mask[i].all()))
    return NeighborReport(int(step), k, A.tolist(), np.asarray(anchor_labels).tolist(), kn, en, kh, eh, zero)


# --- CKA -----------------------------------------------------------------------------

def _center(K):
    return K - K.mean(0, keepdims=True) - K.mean(1, keepdims=True) + K.mean()


def cka(K, L):
    """Centred kernel alignment ``<HKH, HLH>_F / (|HKH|_F |HLH|_F)``; ``nan`` if either norm is 0."""
    Kc, Lc = _center(np.asarray(K, dtype=np.float64)), _center(np.asarray(L, dtype=np.float64))
    nk, nl = math.sqrt(np.sum(Kc * Kc)), math.sqrt(np.sum(Lc * Lc))
    if nk == 0 or nl == 0:
        return float("nan")
    return float(np.sum(Kc * Lc) / (nk * nl))


@dataclass
class CkaSeries:
    steps: list
    values: list

    def to_csv(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "cka"])
            for s, v in zip(self.steps, self.values):
                w.writerow([s, repr(float(v))])


def cka_series(record, points, labels, steps=None):
    """CKA between the tangent Gram and ``y y^T`` at each requested step (missing values dropped)."""
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64).reshape(len(X), -1)
    L = gram(y)
    steps = list(record.steps) if steps is None else list(steps)
    out = CkaSeries([], [])
    for k in steps:
        K = gram(jacobian(record.model, record.params[record.index_of(int(k))], X))
        v = cka(K, L)
        if not math.isnan(v):
            out.steps.append(int(k))
            out.values.append(v)
    return out


def cka_shuffle_null(K, labels, n_perm=200, seed=0, q=99):
    """``q``-th percentile of ``|CKA|`` under label permutations."""
    y = np.asarray(labels, dtype=np.float64).reshape(len(K), -1)
    rng = keyed_rng(seed, STREAM_MISC)
    vals = [abs(cka(K, gram(y[rng.permutation(len(y))]))) for _ in range(n_perm)]
    return float(np.percentile(vals, q))


# --- null-space residual --------------------------------------------------------------

def null_space_statistic(J, delta):
    """``sqrt(delta^T G delta / n)`` with ``G = J J^T / n``."""
    delta = np.asarray(delta, dtype=np.float64).ravel()
    n = len(delta)
    v = np.multiply(J, delta[:, None]).sum(0)  # J^T delta
    return math.sqrt(max(float(np.multiply(v, v).sum()), 0.0) / (n * n))


@dataclass
class NullSpaceReport:
    steps: list
    statistic: list
    loss_slope: float
    stationary: bool
    gate: float

    def to_json(self, path):
        _write_json(asdict(self), path)


def loss_slope(record, window=0.2):
    """Least-squares ``d(loss)/dt`` over the last ``window`` fraction of the recorded full losses."""
    L = np.asarray(record.full_losses, dtype=np.float64)
    t = np.arange(len(L)) * record.config.eta
    n = max(2, int(round(window * len(L))))
    return float(np.polyfit(t[-n:], L[-n:], 1)[0])


def null_space_residual(record, points, targets, steps=None, window=0.2, gate_factor=10.0):
    """The residual statistic at initialisation, mid-training and the end of a record.

    ``stationary`` is the heuristic gate ``|d loss / dt| <= gate_factor * eta``
    over the final ``window`` of training.
    """
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    Y = np.asarray(targets, dtype=np.float64).reshape(len(X))
    if steps is None:
        s = record.steps
        steps = [int(s[0]), int(s[len(s) // 2]), int(s[-1])]
    vals = []
    for k in steps:
        th = record.params[record.index_of(int(k))]
        delta = Y - forward(record.model, th, X)[:, 0]
        vals.append(null_space_statistic(jacobian(record.model, th, X), delta))
    slope = loss_slope(record, window) if record.full_losses is not None else float("nan")
    gate = gate_factor * record.config.eta
    return NullSpaceReport([int(k) for k in steps], vals, slope, bool(abs(slope) <= gate), gate)


@dataclass
class NullSpaceStudy:
    etas: list
    mean: list  # seed-mean statistic at T
    stderr: list
    initial: float
    stationary: list  # every run passed the gate at that eta
    loss_slope: list  # seed-mean slope

    @property
    def monotone(self):
        return all(a > b for a, b in zip(self.mean, self.mean[1:]))

    def to_json(self, path):
        d = asdict(self)
        d["monotone"] = self.monotone
        _write_json(d, path)

    def to_csv(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["eta", "statistic", "stderr", "stationary"])
            for row in zip(self.etas, self.mean, self.stderr, self.stationary):
                w.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), int(row[3])])


def null_space_eta_study(model, dataset, theta0, cfg, etas, T, n_seeds, window=0.2, gate_factor=10.0, threads=1):
    """Seed-averaged terminal statistic for ``cfg`` rerun at each rate over the horizon ``T``."""
    out = NullSpaceStudy([], [], [], float("nan"), [], [])
    for eta in etas:
        K = int(round(T / eta))
        if not math.isclose(K * eta, T, rel_tol=1e-9):
            raise ValueError("horizon T must be a whole number of steps at every rate")
        runs = monte_carlo_runs(model, dataset, replace(cfg, eta=eta, steps=K), n_seeds, theta0,
                                record_stride=max(K // 2, 1), full_loss=True, threads=threads)
        reps = [null_space_residual(r, dataset.inputs, dataset.targets, window=window, gate_factor=gate_factor)
                for r in runs]
        fin = np.array([r.statistic[-1] for r in reps])
        out.etas.append(float(eta))
        out.mean.append(float(fin.mean()))
        out.stderr.append(float(fin.std(ddof=1) / math.sqrt(len(fin))) if len(fin) > 1 else float("nan"))
        out.initial = reps[0].statistic[0]
        out.stationary.append(all(r.stationary for r in reps))
        out.loss_slope.append(float(np.mean([r.loss_slope for r in reps])))
    return out


# --- linear separability ---------------------------------------------------------------

@dataclass
class MarginReport:
    accuracy: float
    hinge: float
    epochs: int

    def to_json(self, path):
        _write_json(asdict(self), path)


def linear_margin(F, labels, epochs=500, lam=1e-4, lr=1.0, standardize=True):
    """Soft-margin linear separator by projected subgradient descent on the regularised mean hinge loss.

    ``F`` is ``n x d``; labels are mapped to ``{-1, +1}``.  Steps are
    ``lr / sqrt(t)`` and the iterate is projected onto the ball of radius
    ``1/sqrt(lam)``.  The nonzero iterate with the smallest hinge loss is reported.
    """
    F = np.asarray(F, dtype=np.float64)
    y = np.where(np.asarray(labels) > 0, 1.0, -1.0)
    if standardize:
        mu, sd = F.mean(0), F.std(0)
        F = (F - mu) / np.where(sd > 0, sd, 1.0)
    X = np.concatenate([F, np.ones((len(F), 1))], axis=1)
    w = np.zeros(X.shape[1])
    radius = 1 / math.sqrt(lam)
    best = (float("inf"), 0.0)
    for t in range(epochs + 1):
        z = y * np.multiply(X, w[None, :]).sum(1)
        hinge = float(np.maximum(0.0, 1.0 - z).mean())
        if t > 0 and hinge < best[0]:  # w = 0 ties every score
            best = (hinge, float(np.mean(z > 0)))
        if t == epochs:
            break
        act = z < 1
        g = lam * w - np.multiply(X[act], y[act, None]).sum(0) / len(X)
        w = w - lr / math.sqrt(t + 1) * g
        nrm = math.sqrt(float(np.multiply(w, w).sum()))
        if nrm > radius:
            w *= radius / nrm
    return MarginReport(best[1], best[0], epochs)


# --- projections and cluster scores --------------------------------------------------------

def pca_projection(F, k=2):
    """Top-``k`` principal component scores, with signs fixed so each axis's largest loading is positive."""
    F = np.asarray(F, dtype=np.float64)
    C = F - F.mean(0)
    U, s, Vt = np.linalg.svd(C, full_matrices=False)
    Vt = Vt[:k]
    sign = np.sign(Vt[np.arange(len(Vt)), np.argmax(np.abs(Vt), axis=1)])
    Vt = Vt * np.where(sign == 0, 1.0, sign)[:, None]
    return np.multiply(C[:, None, :], Vt[None, :, :]).sum(-1)


def save_projection_csv(P, labels, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"pc{i + 1}" for i in range(P.shape[1])] + ["label"])
        for row, lab in zip(P, labels):
            w.writerow([repr(float(v)) for v in row] + [repr(float(lab))])


def silhouette_score(F, labels):
    """Mean silhouette with Euclidean distances (a label-separation score for feature clouds)."""
    F = np.asarray(F, dtype=np.float64)
    labels = np.asarray(labels)
    sq = np.multiply(F, F).sum(1)
    D = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * gram(F), 0.0))
    cls = np.unique(labels)
    if len(cls) < 2:
        raise ValueError("silhouette needs at least two classes")
    s = np.zeros(len(F))
    for i in range(len(F)):
        own = labels == labels[i]
        n_own = own.sum() - 1
        if n_own == 0:
            continue
        a = D[i, own].sum() / n_own
        b = min(D[i, labels == c].mean() for c in cls if c != labels[i])
        s[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(s.mean())
