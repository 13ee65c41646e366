"""Rebuild trained outputs from kernel-weighted residual sums and measure the gap.

Every reconstruction has the form

    f(x, theta_0) - sum_k  q_k * < grad f(x, theta_k), P_k^{-1} G_k >

where ``G_k`` is the full-batch loss gradient at step ``k`` (plain methods) or
an exponentially weighted history of such gradients (momentum methods).  By
bilinearity ``<grad f(x), P^{-1} grad L> = (1/N) sum_n K^P(x, x_n) dl/df_n``,
which is how the sums are evaluated by default (``contraction="kernel"``);
``contraction="gradient"`` contracts with ``grad L`` directly and is cheaper.

Expectations over runs are paired: every run contributes its own actual
output and its own reconstruction.  Each run also carries a martingale
control variate ``C = -sum_k q_k <h_k, g_{B_k} - grad L(theta_k)>`` whose
coefficients ``h_k`` depend only on the past, so ``E[C] = 0`` exactly; the
``*_cv`` estimates subtract it, which removes most of the sampling noise.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import forward, forward_and_jacobian, left_fold_mean, SquaredError
from .kernels import kernel_from_features, quadrature_weights
from .optimizers import cosine_weight

METHODS = ("gd", "sgd", "sgdm", "rmsprop", "adam", "cosine")


@dataclass
class ReconstructionReport:
    method: str
    eta: float
    n_seeds: int
    stride: int
    test_points: list
    actual: list
    reconstructed: list
    abs_error: list
    stderr: list
    gap_cv: list
    stderr_cv: list
    error: float  # headline: max over points of |gap| for the selected estimator
    error_stderr: float
    estimator: str
    valid: bool  # headline gap exceeds 5 standard errors (always true for a single deterministic run)
    options: dict = field(default_factory=dict)
    trajectory_kind: str = "discrete"
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def to_csv(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            p = len(self.test_points[0])
            w.writerow([f"x{i}" for i in range(p)] + ["actual", "reconstructed", "abs_error", "stderr"])
            for x, a, r, e, s in zip(self.test_points, self.actual, self.reconstructed, self.abs_error, self.stderr):
                w.writerow([repr(float(v)) for v in (*x, a, r, e, s)])


@dataclass
class RunTerms:
    """Per-run pieces, each of shape ``(R, n_test)``."""

    actual: np.ndarray
    initial: np.ndarray
    correction: np.ndarray
    control: np.ndarray

    @property
    def reconstructed(self):
        return self.initial - self.correction


# --- shared sweep ------------------------------------------------------------

def _stack_runs(runs, kinds):
    runs = list(runs)
    if not runs:
        raise ValueError("no runs given")
    r0 = runs[0]
    if r0.config.kind not in kinds:
        raise ValueError(f"record was produced by {r0.config.kind!r}, expected one of {kinds}")
    for r in runs[1:]:
        if not np.array_equal(r.params[0], r0.params[0]):
            raise ValueError("runs do not share the initial parameters")
        if r.config.with_(seed=0) != r0.config.with_(seed=0) or not np.array_equal(r.steps, r0.steps):
            raise ValueError("runs differ in configuration or recorded steps")
    if any(r.diverged for r in runs):
        raise ValueError("cannot reconstruct diverged runs")
    return runs, np.stack([np.asarray(r.params) for r in runs])  # (R, n_snap, d)


def _contract(Jx, Jn, res, pdiag, mode, gL):
    """``(1/N) sum_n K^P(x, x_n) res_n`` for every run; ``(R, n_test)``."""
    Wx = Jx if pdiag is None else Jx / pdiag[:, None, :]
    if mode == "gradient":
        return np.multiply(Wx, gL[:, None, :]).sum(-1)
    out = np.empty(Wx.shape[:2])
    for r in range(Wx.shape[0]):
        K, _ = kernel_from_features(Wx[r], Jn[r])
        out[r] = left_fold_mean(K * res[r][None, :], axis=-1)
    return out


def _dot(Jx, v, pdiag=None):
    Wx = Jx if pdiag is None else Jx / pdiag[:, None, :]
    return np.multiply(Wx, v[:, None, :]).sum(-1)


class _Sweep:
    """Tangent features and residuals along stacked runs, one snapshot at a time."""

    def __init__(self, runs, params, dataset, X, loss):
        self.runs, self.params, self.ds = runs, params, dataset
        self.model = runs[0].model
        self.X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.loss = loss

    def at(self, i, need_batch=False):
        th = self.params[:, i]
        fx, Jx = forward_and_jacobian(self.model, th, self.X)
        fn, Jn = forward_and_jacobian(self.model, th, self.ds.inputs)
        res = self.loss.dloss(fn, self.ds.targets)[..., 0]  # (R, N)
        G = res[..., None] * Jn
        gL = left_fold_mean(G, axis=-2)
        gB = None
        k = int(self.runs[0].steps[i])
        if need_batch and k < len(self.runs[0].batches):
            idx = np.stack([r.batches[k] for r in self.runs])
            gB = left_fold_mean(G[np.arange(len(self.runs))[:, None], idx], axis=-2)
        return k, fx[..., 0], Jx, Jn, res, gL, gB

    def final_outputs(self):
        return forward(self.model, self.params[:, -1], self.X)[..., 0]


def _summarise(method, terms, X, eta, stride, estimator, options, notes, kind="discrete"):
    R = terms.actual.shape[0]
    gap_r = terms.actual - terms.reconstructed
    gap_cv_r = gap_r - terms.control
    mean_a = terms.actual.mean(0)
    mean_r = terms.reconstructed.mean(0)
    gap = gap_r.mean(0)
    gap_cv = gap_cv_r.mean(0)
    if R > 1:
        se = gap_r.std(0, ddof=1) / math.sqrt(R)
        se_cv = gap_cv_r.std(0, ddof=1) / math.sqrt(R)
    else:
        se = se_cv = np.zeros_like(gap)
    g, s = (gap_cv, se_cv) if estimator == "cv" else (gap, se)
    j = int(np.argmax(np.abs(g)))
    err, err_se = float(abs(g[j])), float(s[j])
    valid = bool(R == 1 or err > 5 * err_se)
    return ReconstructionReport(
        method, float(eta), R, stride, [list(map(float, x)) for x in X], mean_a.tolist(), mean_r.tolist(),
        np.abs(gap).tolist(), se.tolist(), gap_cv.tolist(), se_cv.tolist(), err, err_se, estimator, valid,
        options, kind, notes)


def _hypothesis_notes(model, cfg):
    notes = []
    if "relu" in model.activations:
        notes.append("relu activation lies outside the smoothness hypotheses")
    notes.append(f"realised rates: mu={cfg.mu:.6g}, c1={cfg.c1:.6g}, c2={cfg.c2:.6g}")
    return notes


# --- plain (single-time) reconstructions -------------------------------------

def _single_time(method, runs, dataset, X, loss, kinds, quadrature, schedule, precond, contraction,
                 estimator, want_cv):
    runs, params = _stack_runs(runs, kinds)
    sw = _Sweep(runs, params, dataset, X, loss)
    cfg = runs[0].config
    steps = runs[0].steps
    times = steps * cfg.eta
    q = quadrature_weights(times, quadrature)
    if len(steps) > 1:
        q[:-1] = np.diff(steps) * cfg.eta if quadrature == "left_riemann" else q[:-1]
    if schedule:
        q = q * np.array([cosine_weight(t, cfg.horizon, cfg.kappa) for t in times])
    stride = int(steps[1] - steps[0]) if len(steps) > 1 else 1
    R = len(runs)
    corr = np.zeros((R, sw.X.shape[0]))
    cv = np.zeros_like(corr)
    f0 = None
    for i in range(len(steps)):
        k, fx, Jx, Jn, res, gL, gB = sw.at(i, need_batch=want_cv and stride == 1)
        if i == 0:
            f0 = fx
        if q[i] == 0:
            continue
        pd = pd_cv = None
        if precond:
            pd, pd_cv = _rms_diag(runs, i, cfg, gL)
        corr = corr + q[i] * _contract(Jx, Jn, res, pd, contraction, gL)
        if gB is None:
            continue
        cv = cv - q[i] * _dot(Jx, gB - gL, pd_cv)
    terms = RunTerms(sw.final_outputs(), f0, corr, cv)
    opts = {"quadrature": quadrature, "contraction": contraction, "schedule_weight": bool(schedule)}
    if schedule:
        opts["kappa"] = cfg.kappa
    rep = _summarise(method, terms, sw.X, cfg.eta, stride, estimator, opts, _hypothesis_notes(runs[0].model, cfg))
    return rep, terms


def _rms_diag(runs, i, cfg, gL):
    """Preconditioner the update divided by, and a past-measurable stand-in for the control variate."""
    s_applied = np.stack([r.applied["second_moment"][i] for r in runs])
    s_prev = np.stack([r.state["second_moment"][i] for r in runs])
    pd = np.sqrt(s_applied) + cfg.epsilon
    pd_cv = np.sqrt(cfg.beta * s_prev + (1 - cfg.beta) * gL * gL) + cfg.epsilon
    return pd, pd_cv


def reconstruct_gd(record, dataset, test_points, loss=SquaredError(), quadrature="left_riemann",
                   contraction="kernel"):
    """Deterministic identity along a full-batch gradient-descent record."""
    if record.config.kind != "gd" and record.config.resolve_batch(dataset.n) != dataset.n:
        raise ValueError("reconstruct_gd needs a full-batch record")
    if record.config.schedule != "constant":
        raise ValueError("use reconstruct_cosine_schedule for scheduled runs")
    return _single_time("gd", [record], dataset, test_points, loss, ("gd", "sgd"), quadrature, False, False,
                        contraction, "plain", False)[0]


def reconstruct_cosine_schedule(record, dataset, test_points, loss=SquaredError(), quadrature="left_riemann",
                                contraction="kernel", runs=None):
    """Schedule-weighted reconstruction: every kernel term carries ``w(t)``."""
    recs = runs if runs is not None else [record]
    cfg = recs[0].config
    if cfg.schedule != "cosine":
        raise ValueError("record was not trained with the cosine schedule")
    est = "cv" if len(recs) > 1 else "plain"
    return _single_time("cosine", recs, dataset, test_points, loss, ("gd", "sgd"), quadrature, True, False,
                        contraction, est, len(recs) > 1)[0]


def reconstruct_sgd_expected(runs, dataset, test_points, loss=SquaredError(), quadrature="left_riemann",
                             contraction="kernel", estimator="cv", return_terms=False):
    """Seed-averaged actual output against the seed-averaged per-run kernel sum."""
    rep, terms = _single_time("sgd", runs, dataset, test_points, loss, ("sgd", "gd"), quadrature,
                              runs[0].config.schedule == "cosine", False, contraction, estimator, True)
    return (rep, terms) if return_terms else rep


def reconstruct_rmsprop_expected(runs, dataset, test_points, loss=SquaredError(), contraction="kernel",
                                 estimator="cv", return_terms=False):
    """Kernel in the ``P_k^{-1}`` metric with ``P_k = sqrt(s_{k+1}) + eps`` from the recorded buffers."""
    rep, terms = _single_time("rmsprop", runs, dataset, test_points, loss, ("rmsprop",), "left_riemann",
                              False, True, contraction, estimator, True)
    return (rep, terms) if return_terms else rep


# --- memory (two-time) reconstructions ----------------------------------------

def exponential_cell_weights(rate, eta):
    """``(r, w0)`` for weights ``w_j = w0 * r**j``: ``rate e^{-rate (t - s)}`` integrated over one step cell."""
    a = rate * eta
    r = math.exp(-a)
    w0 = -math.expm1(-a) / a if a > 0 else 1.0
    return r, w0


def reconstruct_sgdm_expected(runs, dataset, test_points, loss=SquaredError(), memory="exponential",
                              mode="recursive", contraction="kernel", estimator="cv", return_terms=False):
    """Double sum with memory weights between the gradient at ``s`` and the kernel at ``t``.

    ``memory="exponential"`` integrates ``mu e^{-mu (t - s)}`` exactly over each
    step, normalised per unit of ``eta mu``; ``memory="geometric"`` uses the
    discrete weights ``beta**(k - i)``.
    """
    runs, params = _stack_runs(runs, ("sgdm",))
    cfg = runs[0].config
    if not np.all(np.diff(runs[0].steps) == 1):
        raise ValueError("momentum reconstruction needs stride 1 (two-time kernels)")
    sw = _Sweep(runs, params, dataset, test_points, loss)
    if memory == "exponential":
        r, w0 = exponential_cell_weights(cfg.mu, cfg.eta)
    elif memory == "geometric":
        r, w0 = cfg.beta, 1.0
    else:
        raise ValueError(f"unknown memory kernel {memory!r}")
    K = cfg.steps
    eta = cfg.eta
    # total weight later steps put on the gradient noise of step i (discrete, known in advance)
    tail = np.array([sum(cfg.beta ** j for j in range(K - i)) for i in range(K)])
    R, n = len(runs), sw.X.shape[0]
    corr, cv = np.zeros((R, n)), np.zeros((R, n))
    Gmem = None
    hist = []
    f0 = None
    for i in range(K + 1):
        k, fx, Jx, Jn, res, gL, gB = sw.at(i, need_batch=True)
        if i == 0:
            f0 = fx
        if i == K:
            break
        if mode == "explicit":
            hist.append((Jn, res))
            term = np.zeros((R, n))
            for s, (Jn_s, res_s) in enumerate(hist):
                term = term + w0 * r ** (k - s) * _contract(Jx, Jn_s, res_s, None, "kernel", None)
            corr = corr + eta * term
        else:
            Gmem = w0 * gL if Gmem is None else r * Gmem + w0 * gL
            corr = corr + eta * _contract_memory(Jx, Gmem, contraction, hist_needed=False)
        cv = cv - eta * tail[k] * _dot(Jx, gB - gL)
    terms = RunTerms(sw.final_outputs(), f0, corr, cv)
    opts = {"memory": memory, "mode": mode, "contraction": contraction, "mu": cfg.mu}
    rep = _summarise("sgdm", terms, sw.X, cfg.eta, 1, estimator, opts, _hypothesis_notes(runs[0].model, cfg))
    return (rep, terms) if return_terms else rep


def _contract_memory(Jx, G, contraction, hist_needed):
    # the memory sum is kept as a weighted gradient; its kernel form is the
    # same bilinear contraction, so both modes agree up to rounding
    return _dot(Jx, G)


def adam_prefactor(t, c1, c2):
    return math.sqrt(-math.expm1(-c2 * t)) / (-math.expm1(-c1 * t))


def reconstruct_adam_expected(runs, dataset, test_points, loss=SquaredError(), single_coefficient="stated",
                              estimator="cv", return_terms=False):
    """Adam reconstruction with the ``c1 beta1`` memory term and the single-time term.

    Step ``k`` uses ``t = (k + 1) eta`` in the prefactor and in
    ``P = sqrt(v_{k+1}) + eps sqrt(1 - e^{-c2 t})`` (raw running average),
    so the sums start at ``t = eta``.  ``single_coefficient="stated"`` weights
    the single-time term by ``c1 (1 - beta1)``; ``"derived"`` uses ``1 - beta1``,
    which is what expanding the Adam drift gives.
    """
    runs, params = _stack_runs(runs, ("adam",))
    cfg = runs[0].config
    if not np.all(np.diff(runs[0].steps) == 1):
        raise ValueError("Adam reconstruction needs stride 1 (two-time kernels)")
    if cfg.adam_bias_correction != "standard":
        raise ValueError("Adam reconstruction assumes the standard bias correction")
    sw = _Sweep(runs, params, dataset, test_points, loss)
    eta, c1, c2, b1, b2 = cfg.eta, cfg.c1, cfg.c2, cfg.beta1, cfg.beta2
    if single_coefficient == "stated":
        a_single = c1 * (1 - b1)
    elif single_coefficient == "derived":
        a_single = 1 - b1
    else:
        raise ValueError("single_coefficient must be 'stated' or 'derived'")
    r = math.exp(-c1 * eta)
    w_cell = -math.expm1(-c1 * eta)  # c1 * integral of e^{-c1 (t - s)} over one cell
    K = cfg.steps
    A = np.array([adam_prefactor((k + 1) * eta, c1, c2) for k in range(K)])
    # deterministic sensitivity of later steps to the gradient noise entering m at step i
    sens = np.zeros(K)
    acc = 0.0
    for i in range(K - 1, -1, -1):
        acc = A[i] + b1 * acc
        sens[i] = (1 - b1) * acc
    R, n = len(runs), sw.X.shape[0]
    corr, cv = np.zeros((R, n)), np.zeros((R, n))
    D = np.zeros((R, runs[0].model.n_params))
    f0 = None
    prev_gL = None
    for i in range(K + 1):
        k, fx, Jx, Jn, res, gL, gB = sw.at(i, need_batch=True)
        if i == 0:
            f0 = fx
        if i == K:
            break
        if prev_gL is not None:
            D = r * D + prev_gL
        prev_gL = gL
        t = (k + 1) * eta
        e2 = -math.expm1(-c2 * t)
        v_app = np.stack([rr.applied["second_moment"][i] for rr in runs])
        v_prev = np.stack([rr.state["second_moment"][i] for rr in runs])
        pd = np.sqrt(v_app) + cfg.epsilon * math.sqrt(e2)
        drive = b1 * w_cell * D + a_single * gL
        corr = corr + eta * A[k] * _dot(Jx, drive, pd)
        pd_cv = np.sqrt(b2 * v_prev + (1 - b2) * gL * gL) + cfg.epsilon * math.sqrt(e2)
        cv = cv - eta * sens[k] * _dot(Jx, gB - gL, pd_cv)
    terms = RunTerms(sw.final_outputs(), f0, corr, cv)
    opts = {"single_coefficient": single_coefficient, "c1": c1, "c2": c2, "beta1": b1, "beta2": b2}
    rep = _summarise("adam", terms, sw.X, eta, 1, estimator, opts, _hypothesis_notes(runs[0].model, cfg))
    return (rep, terms) if return_terms else rep


# --- continuous surrogate ------------------------------------------------------

def reconstruct_along_path(model, dataset, path, test_points, loss=SquaredError(), quadrature="left_riemann"):
    """Deterministic identity evaluated along a simulated path recorded on its own time grid.

    Returns ``(actual, reconstructed)`` for each path, shapes ``(P, n_test)``.
    """
    X = np.atleast_2d(np.asarray(test_points, dtype=np.float64))
    q = quadrature_weights(path.times, quadrature)
    corr = 0.0
    f0 = None
    for i in range(len(path.times)):
        th = path.Z[:, i]
        fx, Jx = forward_and_jacobian(model, th, X)
        if i == 0:
            f0 = fx[..., 0]
        if q[i] == 0:
            continue
        fn, Jn = forward_and_jacobian(model, th, dataset.inputs)
        res = loss.dloss(fn, dataset.targets)[..., 0]
        gL = left_fold_mean(res[..., None] * Jn, axis=-2)
        corr = corr + q[i] * _dot(Jx, gL)
    actual = forward(model, path.Z[:, -1], X)[..., 0]
    return actual, f0 - corr


# --- eta scaling ---------------------------------------------------------------

@dataclass
class EtaScalingReport:
    method: str
    etas: list
    errors: list
    stderrs: list
    ratios: list
    valid: list
    factor: float
    band: tuple
    passed: bool
    reports: list = field(default_factory=list, repr=False)

    def to_csv(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["eta", "gap", "stderr", "ratio"])
            for i, e in enumerate(self.etas):
                ratio = "" if i == 0 else repr(float(self.ratios[i - 1]))
                w.writerow([repr(float(e)), repr(float(self.errors[i])), repr(float(self.stderrs[i])), ratio])

    def to_json(self, path):
        d = asdict(self)
        d["reports"] = [r.to_dict() for r in self.reports]
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def eta_scaling(method, build, etas, band=(1.5, 3.0), gate=5.0):
    """Run ``build(eta) -> ReconstructionReport`` over a decreasing grid and test successive ratios.

    A ratio is only assessed when both gaps exceed ``gate`` standard errors.
    """
    etas = [float(e) for e in etas]
    reports = [build(e) for e in etas]
    errs = [r.error for r in reports]
    ses = [r.error_stderr for r in reports]
    valid = [r.n_seeds == 1 or e > gate * s for r, e, s in zip(reports, errs, ses)]
    ratios = [errs[i] / errs[i + 1] if errs[i + 1] > 0 else float("inf") for i in range(len(etas) - 1)]
    factor = etas[0] / etas[1]
    passed = all(valid) and all(band[0] <= q <= band[1] for q in ratios)
    return EtaScalingReport(method, etas, errs, ses, ratios, valid, factor, tuple(band), passed, reports)


# --- diffusion toy -----------------------------------------------------------------

@dataclass
class LocalityReport:
    levels: list
    matrix: list  # [tau][t]: mean normalised kernel between level-tau queries and level-t training pairs
    matched: list
    most_distant: list
    dominant: list
    snapshot: str
    reconstruction: ReconstructionReport | None = None

    @property
    def diagonally_dominant(self):
        return all(self.dominant)

    def to_json(self, path):
        d = asdict(self)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")

    def to_csv(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tau"] + [f"t{t}" for t in self.levels])
            for tau, row in zip(self.levels, self.matrix):
                w.writerow([tau] + [repr(float(v)) for v in row])


def diffusion_queries(dataset, n_per_level=16, seed=1):
    """Fresh noised inputs ``(x_tau, gamma(tau))`` at every level, drawn like the training pairs."""
    from .datagen import make_diffusion_toy

    meta = dataset.meta
    q = make_diffusion_toy(n_per_level, meta["T"], meta["embed_dim"], seed, meta["max_period"])
    return q.inputs, q.labels, q.targets


def diffusion_toy_reconstruct(record, dataset, n_queries=16, query_seed=1, snapshot="final", runs=None):
    """Level-by-level locality of the normalised kernel on the diffusion toy.

    ``snapshot="final"`` uses the last recorded parameters; ``"path"``
    averages the matrix over all recorded snapshots.  When ``runs`` (SGD
    records sharing the initialisation) are supplied the expected-output
    reconstruction is also run on the queries.
    """
    Xq, lq, _ = diffusion_queries(dataset, n_queries, query_seed)
    lt = np.asarray(dataset.labels).astype(int)
    levels = sorted(set(lt.tolist()))
    idx = [len(record.steps) - 1] if snapshot == "final" else range(len(record.steps))
    M = np.zeros((len(levels), len(levels)))
    for i in idx:
        th = record.params[i]
        _, Jq = forward_and_jacobian(record.model, th, Xq)
        _, Jt = forward_and_jacobian(record.model, th, dataset.inputs)
        K, _ = kernel_from_features(Jq, Jt, normalize=True)
        for a, tau in enumerate(levels):
            rows = K[lq == tau]
            for b, t in enumerate(levels):
                M[a, b] += rows[:, lt == t].mean()
    M /= len(idx)
    matched = [float(M[a, a]) for a in range(len(levels))]
    far = []
    for a in range(len(levels)):
        dist = np.abs(np.arange(len(levels)) - a)
        far.append(float(M[a, dist == dist.max()].mean()))
    dom = [m > f for m, f in zip(matched, far)]
    rep = None
    if runs is not None:
        rep = reconstruct_sgd_expected(runs, dataset, Xq)
    return LocalityReport(levels, M.tolist(), matched, far, dom, snapshot, rep)
