"""Builtin experiments: run configs, their schema, and the artifact tree each one writes."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import platform
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np

from . import __version__
from . import domingos as dm
from . import trajectory as tj
from .autodiff import ModelSpec, NonFiniteError, init_params, jacobian
from .datagen import (
    make_circle_disk,
    make_diffusion_toy,
    make_ellipse_variant,
    make_regression_1d,
    save_dataset,
)
from .diagnostics import (
    cka_series,
    kernel_neighbors,
    linear_margin,
    null_space_eta_study,
    null_space_residual,
    pca_projection,
    rank_gap,
    relu_rankgap_model,
    save_projection_csv,
    silhouette_score,
)
from .kernels import gradient_kernel, kernel_from_features, save_kernel_csv, save_kernel_pgm
from .optimizers import OptimizerConfig
from .sde import ou_check, weak_order_test

SCHEMA_VERSION = 1
SENTINEL = "FAILED"
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    """Invalid run configuration (exit status 2)."""


class DivergenceError(RuntimeError):
    """A training run produced non-finite values (exit status 3)."""


# --- schema ------------------------------------------------------------------------

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_UNIT = {"type": "number", "minimum": 0, "exclusiveMaximum": 1}

DATASET_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["circle_disk", "ellipse", "regression_1d", "diffusion_toy"]},
        "function": {"enum": ["sine", "square_wave", "linear_2x_plus_1"]},
        "n": {"type": "integer", "minimum": 2},
        "n_per_class": {"type": "integer", "minimum": 1},
        "seed": {"type": ["integer", "null"], "minimum": 0},
        "interval": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        "n_samples": {"type": "integer", "minimum": 1},
        "n_timesteps": {"type": "integer", "minimum": 2},
        "embed_dim": {"type": "integer", "minimum": 2},
    },
}

MODEL_SCHEMA = {
    "type": "object",
    "required": ["layer_widths", "activations"],
    "additionalProperties": False,
    "properties": {
        "layer_widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2},
        "activations": {"type": "array", "items": {"enum": ["tanh", "relu", "identity", "sigmoid"]}},
        "init_scale": {"type": "number", "exclusiveMinimum": 0},
        "bias_std": {"type": "number", "minimum": 0},
    },
}

OPTIMIZER_SCHEMA = {
    "type": "object",
    "required": ["kind", "eta", "steps"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["gd", "sgd", "sgdm", "rmsprop", "adam"]},
        "eta": {"type": "number", "exclusiveMinimum": 0},
        "steps": {"type": "integer", "minimum": 0},
        "batch_size": {"type": ["integer", "null"], "minimum": 1},
        "beta": _UNIT,
        "beta1": _UNIT,
        "beta2": _UNIT,
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "schedule": {"enum": ["constant", "cosine"]},
        "kappa": {"type": "number", "minimum": 1},
        "adam_bias_correction": {"enum": ["standard", "recursive"]},
    },
}


def config_schema(names=None):
    """JSON schema every resolved run config must satisfy (builtin ``params`` are checked separately)."""
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "pathkernel run config",
        "type": "object",
        "required": ["schema_version", "experiment", "seed", "dataset", "model", "optimizer",
                     "record_stride", "params"],
        "additionalProperties": False,
        "properties": {
            "schema_version": {"const": SCHEMA_VERSION},
            "experiment": {"enum": sorted(names or BUILTINS)},
            "seed": {"type": "integer", "minimum": 0},
            "dataset": DATASET_SCHEMA,
            "model": MODEL_SCHEMA,
            "optimizer": OPTIMIZER_SCHEMA,
            "record_stride": {"type": "integer", "minimum": 1},
            "params": {"type": "object"},
        },
    }


def _validate(instance, schema, prefix=""):
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(instance), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        where = prefix + "/".join(str(p) for p in e.absolute_path)
        raise ConfigError(f"{where or '<root>'}: {e.message} (constraint: {e.validator})")


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(config, seed_override=None):
    """Merge a (possibly partial) config onto its builtin defaults and validate the result."""
    if not isinstance(config, dict):
        raise ConfigError("<root>: config must be a JSON object")
    name = config.get("experiment")
    if name not in BUILTINS:
        raise ConfigError(f"experiment: unknown builtin {name!r}; valid names: {', '.join(sorted(BUILTINS))}")
    cfg = _merge(BUILTINS[name].defaults(), config)
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
        cfg["optimizer"].pop("seed", None)
    _validate(cfg, config_schema())
    _validate(cfg["params"], BUILTINS[name].params_schema, "params/")
    try:
        ModelSpec(tuple(cfg["model"]["layer_widths"]), tuple(cfg["model"]["activations"]))
        _optimizer(cfg)
    except ValueError as e:
        raise ConfigError(f"model/optimizer: {e}") from None
    return cfg


# --- context -----------------------------------------------------------------------

def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.bool_, bool)):
        return bool(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating, float)):
        return float(o)
    return o


def _dumps(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _dataset(spec):
    kind = spec["kind"]
    if kind == "circle_disk":
        return make_circle_disk(spec.get("n_per_class", 500), spec.get("seed", 0) or 0)
    if kind == "ellipse":
        return make_ellipse_variant(spec.get("n_per_class", 500), spec.get("seed", 0) or 0)
    if kind == "regression_1d":
        return make_regression_1d(spec.get("function", "sine"), spec.get("n", 64), spec.get("seed"),
                                  spec.get("interval"))
    return make_diffusion_toy(spec.get("n_samples", 64), spec.get("n_timesteps", 10), spec.get("embed_dim", 8),
                              spec.get("seed", 0) or 0)


def _optimizer(cfg, **over):
    d = dict(cfg["optimizer"])
    d.setdefault("seed", cfg["seed"])
    d.update(over)
    return OptimizerConfig(**d)


@dataclass
class Context:
    config: dict
    out: Path
    threads: int = 1
    derived: dict = field(default_factory=dict)

    @property
    def params(self):
        return self.config["params"]

    def dataset(self):
        return _dataset(self.config["dataset"])

    def model(self):
        m = self.config["model"]
        return ModelSpec(tuple(m["layer_widths"]), tuple(m["activations"]))

    def theta0(self, model=None):
        m = self.config["model"]
        return init_params(model or self.model(), self.config["seed"], m.get("bias_std", 0.0), m.get("init_scale", 1.0))

    def optimizer(self, **over):
        return _optimizer(self.config, **over)

    def path(self, name):
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, name, obj):
        self.path(name).write_text(_dumps(obj))

    def train(self, model, dataset, cfg, theta0, stride=None):
        rec = tj.train_and_record(model, dataset, cfg, stride or self.config["record_stride"], theta0)
        _check([rec])
        return rec

    def runs(self, model, dataset, cfg, n_seeds, theta0, stride=1, full_loss=False):
        runs = tj.monte_carlo_runs(model, dataset, cfg, n_seeds, theta0, stride, full_loss, self.threads)
        _check(runs)
        return runs


def _check(records):
    bad = [r.run_id for r in records if r.diverged]
    if bad:
        raise DivergenceError(f"{len(bad)} run(s) diverged, first {bad[0]}")


def _points(spec):
    """Test points: an explicit list of rows or ``{"linspace": [lo, hi, n]}`` for scalar inputs."""
    if isinstance(spec, dict):
        lo, hi, n = spec["linspace"]
        return np.linspace(lo, hi, int(n))[:, None]
    return np.atleast_2d(np.asarray(spec, dtype=np.float64))


# --- runners -------------------------------------------------------------------------

def _classification(ctx):
    p = ctx.params
    ds, model = ctx.dataset(), ctx.model()
    save_dataset(ds, ctx.path("dataset"))
    rec = ctx.train(model, ds, ctx.optimizer(), ctx.theta0(model))
    tj.save(rec, ctx.path("trajectory.pktraj"))
    final = int(rec.steps[-1])
    steps = p.get("neighbor_steps") or [0, int(rec.steps[len(rec.steps) // 2]), final]
    steps = sorted({int(s) for s in steps} | {0, final})
    reps = {}
    for k in steps:
        reps[k] = kernel_neighbors(rec, k, p["anchors"], ds.inputs, ds.labels, p["k"], p["anchor_labels"])
        reps[k].to_json(ctx.path(f"neighbors/step{k:06d}.json"))
    order = np.argsort(ds.labels, kind="stable")[::p["heatmap_every"]]
    for k in (0, final):
        K = gradient_kernel(rec, k, ds.inputs[order], weighting="normalized")
        save_kernel_csv(K, ctx.path(f"kernels/normalized_step{k:06d}.csv"))
        save_kernel_pgm(K, ctx.path(f"kernels/normalized_step{k:06d}.pgm"))
    cs = cka_series(rec, ds.inputs, ds.labels)
    cs.to_csv(ctx.path("cka.csv"))
    J0, JT = jacobian(model, rec.params[0], ds.inputs), jacobian(model, rec.params[-1], ds.inputs)
    m_tan = linear_margin(JT, ds.labels, p["margin_epochs"])
    m_in = linear_margin(ds.inputs, ds.labels, p["margin_epochs"])
    ctx.write_json("margin.json", {"tangent_final": m_tan.__dict__, "input": m_in.__dict__})
    sil = {}
    for k, J in ((0, J0), (final, JT)):
        P = pca_projection(J)
        save_projection_csv(P, ds.labels, ctx.path(f"pca/tangent_step{k:06d}.csv"))
        sil[str(k)] = silhouette_score(P, ds.labels)
    ctx.write_json("silhouette.json", sil)
    init, last = reps[0], reps[final]
    checks = {}
    for i, a in enumerate(p["anchors"]):
        tag = f"anchor{i}"
        checks[f"{tag}_final_above_euclidean"] = last.kernel_homogeneity[i] > last.euclidean_homogeneity[i]
        checks[f"{tag}_final_above_init"] = last.kernel_homogeneity[i] > init.kernel_homogeneity[i]
    checks["cka_final_above_init"] = cs.values[-1] > cs.values[0]
    checks["tangent_margin_at_least_input"] = m_tan.accuracy >= m_in.accuracy
    summary = {
        "final_loss": float(rec.full_losses[-1]),
        "kernel_homogeneity": {str(k): r.kernel_homogeneity for k, r in reps.items()},
        "euclidean_homogeneity": last.euclidean_homogeneity,
        "cka_init": cs.values[0], "cka_final": cs.values[-1],
        "margin_accuracy": {"tangent_final": m_tan.accuracy, "input": m_in.accuracy},
        "silhouette_pca": sil,
    }
    return checks, summary


def _gd_scaling(ctx, ds, model, th, etas, T, X, band, kind="gd", **opt):
    def build(eta):
        cfg = ctx.optimizer(kind="gd", eta=eta, steps=int(round(T / eta)), batch_size=None, **opt)
        rec = ctx.train(model, ds, cfg, th, stride=1)
        if cfg.schedule == "cosine":
            return dm.reconstruct_cosine_schedule(rec, ds, X)
        return dm.reconstruct_gd(rec, ds, X)

    return dm.eta_scaling(kind, build, etas, band=tuple(band))


def _regression(ctx):
    p = ctx.params
    ds, model = ctx.dataset(), ctx.model()
    th = ctx.theta0(model)
    save_dataset(ds, ctx.path("dataset"))
    X = _points(p["test_points"])
    study = _gd_scaling(ctx, ds, model, th, p["etas"], p["T"], X, p["band"])
    study.to_csv(ctx.path("reconstruction/eta_scaling.csv"))
    study.to_json(ctx.path("reconstruction/eta_scaling.json"))
    last = study.reports[-1]
    out_range = float(np.ptp(last.actual))
    rec = ctx.train(model, ds, ctx.optimizer(), th)
    tj.save(rec, ctx.path("trajectory.pktraj"))
    cs = cka_series(rec, ds.inputs, ds.targets)
    cs.to_csv(ctx.path("cka.csv"))
    ns = null_space_residual(rec, ds.inputs, ds.targets)
    ns.to_json(ctx.path("null_space.json"))
    checks = {
        "reconstruction_ratios_in_band": all(p["band"][0] <= q <= p["band"][1] for q in study.ratios),
        "reconstruction_error_below_tolerance": last.error < p["relative_tolerance"] * out_range,
        "cka_final_above_init": cs.values[-1] > cs.values[0],
    }
    summary = {"errors": study.errors, "ratios": study.ratios, "output_range": out_range,
               "cka_init": cs.values[0], "cka_final": cs.values[-1], "final_loss": float(rec.full_losses[-1]),
               "null_space_statistic": ns.statistic}
    return checks, summary


def _null_space(ctx):
    p = ctx.params
    ds, model = ctx.dataset(), ctx.model()
    study = null_space_eta_study(model, ds, ctx.theta0(model), ctx.optimizer(), p["etas"], p["T"], p["n_seeds"],
                                 p["window"], p["gate_factor"], threads=ctx.threads)
    study.to_csv(ctx.path("null_space_eta.csv"))
    study.to_json(ctx.path("null_space_eta.json"))
    checks = {"stationarity_gate": all(study.stationary), "monotone_in_eta": study.monotone}
    return checks, {"mean": study.mean, "stderr": study.stderr, "initial": study.initial,
                    "loss_slope": study.loss_slope}


def _rankgap(ctx):
    p = ctx.params
    ds = ctx.dataset()
    save_dataset(ds, ctx.path("dataset"))
    Xt = _points(p["test_points"])
    yt = 2 * Xt[:, 0] + 1
    reps = {}
    for name, biases in sorted(p["settings"].items()):
        if list(ctx.config["model"]["layer_widths"]) != [1, len(biases), 1]:
            raise ConfigError(f"params/settings/{name}: needs model layer_widths [1, {len(biases)}, 1]")
        model, th = relu_rankgap_model(biases, ctx.config["seed"])
        rec = ctx.train(model, ds, ctx.optimizer(), th)
        tj.save(rec, ctx.path(f"{name}/trajectory.pktraj"))
        reps[name] = rank_gap(rec, ds.inputs, Xt, test_targets=yt, oracle=True)
        reps[name].to_json(ctx.path(f"{name}/rank_gap.json"))
        reps[name].to_csv(ctx.path(f"{name}/rank_gap.csv"))
    u, d = reps[p["baseline"]], reps[p["dormant"]]
    checks = {
        "baseline_gap_zero": all(g == 0 for g in u.gap),
        "dormant_gap_positive": min(d.gap) >= 1,
        "dormant_test_loss_higher": d.test_loss[-1] > u.test_loss[-1],
        "svd_matches_exact_oracle": bool(u.oracle_agrees and d.oracle_agrees),
    }
    summary = {n: {"gap": r.gap, "rank_empirical": r.rank_empirical, "final_test_loss": r.test_loss[-1]}
               for n, r in reps.items()}
    return checks, summary


def _weak_order(ctx):
    p = ctx.params
    ds, model = ctx.dataset(), ctx.model()
    ou = ou_check(**p["ou"])
    ctx.write_json("ou_check.json", ou)
    rep = weak_order_test(model, ds, ctx.optimizer(), ctx.theta0(model), p["test_points"], p["etas"], p["n_seeds"],
                          T=p["T"], n_sub=p["n_sub"], threads=ctx.threads)
    rep.to_json(ctx.path("weak_order.json"))
    rep.to_csv(ctx.path("weak_order.csv"))
    lo, hi = p["slope_band"]
    checks = {"ou_closed_form": ou["passed"],
              "slope_in_band_or_inconclusive": (lo <= rep.slope <= hi) or rep.inconclusive}
    return checks, {"slope": rep.slope, "slope_ci": list(rep.slope_ci), "gaps": rep.gaps, "stderrs": rep.stderrs,
                    "noise_floor": rep.noise_floor, "inconclusive": rep.inconclusive}


def _mc_scaling(ctx, method, build_cfg, recon, etas, band, gate):
    p = ctx.params
    ds, model = ctx.dataset(), ctx.model()
    th = ctx.theta0(model)
    X = _points(p["test_points"])

    def build(eta):
        runs = ctx.runs(model, ds, build_cfg(eta), p["n_seeds"], th)
        return recon(runs, ds, X)

    study = dm.eta_scaling(method, build, etas, band=tuple(band), gate=gate)
    study.to_csv(ctx.path(f"{method}_eta_scaling.csv"))
    study.to_json(ctx.path(f"{method}_eta_scaling.json"))
    return study


def _steps(T, eta):
    K = int(round(T / eta))
    if not math.isclose(K * eta, T, rel_tol=1e-9):
        raise ConfigError(f"params/T: horizon {T} is not a whole number of steps at eta={eta}")
    return K


def _domingos_sgd(ctx):
    p = ctx.params
    study = _mc_scaling(ctx, "sgd", lambda e: ctx.optimizer(eta=e, steps=_steps(p["T"], e)),
                        lambda r, d, X: dm.reconstruct_sgd_expected(r, d, X, estimator=p["estimator"]),
                        p["etas"], p["band"], p["gate"])
    return {"ratios_in_band_above_noise": study.passed}, {"gaps": study.errors, "stderrs": study.stderrs,
                                                          "ratios": study.ratios, "valid": study.valid}


def _domingos_sgdm(ctx):
    p = ctx.params
    ds, model = ctx.dataset(), ctx.model()
    th = ctx.theta0(model)
    X = _points(p["test_points"])
    gaps, bitwise = [], True
    for eta in p["etas"]:
        K = _steps(p["T"], eta)
        a = ctx.runs(model, ds, ctx.optimizer(kind="sgdm", beta=0.0, eta=eta, steps=K), p["n_seeds"], th)
        b = ctx.runs(model, ds, ctx.optimizer(kind="sgd", eta=eta, steps=K), p["n_seeds"], th)
        bitwise &= all(np.array_equal(x.params, y.params) for x, y in zip(a, b))
        ra = dm.reconstruct_sgdm_expected(a, ds, X)
        rb = dm.reconstruct_sgd_expected(b, ds, X)
        gaps.append(float(np.max(np.abs(np.asarray(ra.reconstructed) - np.asarray(rb.reconstructed)))))
        ra.to_json(ctx.path(f"sgdm_eta{eta:g}.json"))
    ctx.write_json("collapse.json", {"etas": p["etas"], "max_reconstruction_difference": gaps,
                                     "iterates_bitwise_equal": bitwise})
    checks = {"iterates_bitwise_equal": bitwise,
              "reconstruction_converges_monotonically": all(x > y for x, y in zip(gaps, gaps[1:]))}
    return checks, {"max_reconstruction_difference": gaps}


def _domingos_rmsprop(ctx):
    p = ctx.params
    c = p["rate_constant"]
    study = _mc_scaling(ctx, "rmsprop",
                        lambda e: ctx.optimizer(kind="rmsprop", eta=e, steps=_steps(p["T"], e), beta=1 - c * e),
                        lambda r, d, X: dm.reconstruct_rmsprop_expected(r, d, X, estimator=p["estimator"]),
                        p["etas"], p["band"], p["gate"])
    F = jacobian(ctx.model(), ctx.theta0(), _points(p["test_points"]))
    K, _ = kernel_from_features(F)
    worst = 0.0
    for s in p["identity_scales"]:
        Kc, _ = kernel_from_features(F, F, pdiag=np.full(F.shape[1], float(s)))
        worst = max(worst, float(np.max(np.abs(Kc - K / s))))
    ctx.write_json("weighted_kernel_identity.json", {"scales": p["identity_scales"], "max_abs_error": worst})
    checks = {"ratios_in_band_above_noise": study.passed, "scaled_identity_kernel": worst <= 1e-12}
    return checks, {"gaps": study.errors, "stderrs": study.stderrs, "ratios": study.ratios,
                    "betas": [1 - c * e for e in p["etas"]], "identity_max_abs_error": worst}


def _adam_cfg(ctx, eta, xi, c1, c2, T):
    return ctx.optimizer(kind="adam", eta=eta, steps=_steps(T, eta), beta1=1 - c1 * eta ** (1 - xi),
                         beta2=1 - c2 * eta)


def _domingos_adam(ctx):
    p = ctx.params
    main = _mc_scaling(ctx, "adam", lambda e: _adam_cfg(ctx, e, p["xi"], p["c1"], p["c2"], p["T"]),
                       lambda r, d, X: dm.reconstruct_adam_expected(r, d, X, single_coefficient=p["single_coefficient"]),
                       p["etas"], p["band"], p["gate"])
    summary = {"gaps": main.errors, "stderrs": main.stderrs, "ratios": main.ratios,
               "beta1": [1 - p["c1"] * e ** (1 - p["xi"]) for e in p["etas"]]}
    for i, cmp_ in enumerate(p.get("compare", [])):
        alt = dm.eta_scaling(
            f"adam_{cmp_['single_coefficient']}_xi{cmp_['xi']:g}",
            lambda e, c=cmp_: dm.reconstruct_adam_expected(
                ctx.runs(ctx.model(), ctx.dataset(), _adam_cfg(ctx, e, c["xi"], p["c1"], p["c2"], p["T"]),
                         p["n_seeds"], ctx.theta0()),
                ctx.dataset(), _points(p["test_points"]), single_coefficient=c["single_coefficient"]),
            p["etas"], band=tuple(p["band"]), gate=p["gate"])
        alt.to_csv(ctx.path(f"adam_compare{i}_eta_scaling.csv"))
        summary[f"compare{i}"] = {**cmp_, "gaps": alt.errors, "stderrs": alt.stderrs, "ratios": alt.ratios}
    return {"ratios_in_band_above_noise": main.passed}, summary


def _cosine(ctx):
    p = ctx.params
    ds, model = ctx.dataset(), ctx.model()
    th = ctx.theta0(model)
    X = _points(p["test_points"])
    e, K = p["identity_eta"], _steps(p["T"], p["identity_eta"])
    a = ctx.train(model, ds, ctx.optimizer(kind="gd", eta=e, steps=K, schedule="cosine", kappa=1.0), th, stride=1)
    b = ctx.train(model, ds, ctx.optimizer(kind="gd", eta=e, steps=K), th, stride=1)
    ra, rb = dm.reconstruct_cosine_schedule(a, ds, X), dm.reconstruct_gd(b, ds, X)
    ident = float(np.max(np.abs(np.asarray(ra.reconstructed) - np.asarray(rb.reconstructed))))
    study = _gd_scaling(ctx, ds, model, th, p["etas"], p["T"], X, p["band"], "cosine",
                        schedule="cosine", kappa=p["kappa"])
    study.to_csv(ctx.path("cosine_eta_scaling.csv"))
    study.to_json(ctx.path("cosine_eta_scaling.json"))
    ctx.write_json("kappa_one_identity.json", {"max_abs_difference": ident})
    checks = {"kappa_one_matches_unweighted": ident <= 1e-12,
              "ratios_in_band": all(p["band"][0] <= q <= p["band"][1] for q in study.ratios)}
    return checks, {"kappa_one_difference": ident, "errors": study.errors, "ratios": study.ratios}


def _diffusion(ctx):
    p = ctx.params
    ds, model = ctx.dataset(), ctx.model()
    save_dataset(ds, ctx.path("dataset"))
    rec = ctx.train(model, ds, ctx.optimizer(), ctx.theta0(model))
    tj.save(rec, ctx.path("trajectory.pktraj"))
    checks, summary = {}, {"final_loss": float(rec.full_losses[-1])}
    for snap in ("final", "path"):
        L = dm.diffusion_toy_reconstruct(rec, ds, p["n_queries"], p["query_seed"], snapshot=snap)
        L.to_json(ctx.path(f"locality_{snap}.json"))
        L.to_csv(ctx.path(f"locality_{snap}.csv"))
        checks[f"{snap}_diagonally_dominant"] = L.diagonally_dominant
        summary[snap] = {"matched": L.matched, "most_distant": L.most_distant}
    return checks, summary


# --- registry ------------------------------------------------------------------------

def _obj(props, required=None):
    return {"type": "object", "properties": props, "required": required or sorted(props),
            "additionalProperties": False}


_BAND = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}
_ETAS = {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 3}
_POINTS = {"oneOf": [{"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 1}, "minItems": 1},
                     _obj({"linspace": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}})]}
_SEEDS = {"type": "integer", "minimum": 2}
_POS = {"type": "number", "exclusiveMinimum": 0}
_EST = {"enum": ["cv", "plain"]}


@dataclass(frozen=True)
class Builtin:
    name: str
    summary: str
    checks: str
    budget_minutes: int
    base: dict
    params_schema: dict
    runner: Callable

    def defaults(self):
        return copy.deepcopy({"schema_version": SCHEMA_VERSION, "experiment": self.name, **self.base})

    def describe(self):
        d = self.defaults()
        return {"name": self.name, "summary": self.summary, "checks": self.checks,
                "budget_minutes": self.budget_minutes, "default_config": d}


_SINE64 = {"kind": "regression_1d", "function": "sine", "n": 64}
_SINE32 = {"kind": "regression_1d", "function": "sine", "n": 32}
_QUAD = {"kind": "regression_1d", "function": "linear_2x_plus_1", "n": 32}
_TANH32 = {"layer_widths": [1, 32, 1], "activations": ["tanh"]}
_LINEAR = {"layer_widths": [1, 1, 1], "activations": ["identity"], "bias_std": 0.5}
_QUAD_X = [[0.0], [0.3], [0.62]]

_CLASSIF_PARAMS = _obj({
    "anchors": {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
    "anchor_labels": {"type": "array", "items": _NUM},
    "k": {"type": "integer", "minimum": 1},
    "neighbor_steps": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
    "heatmap_every": {"type": "integer", "minimum": 1},
    "margin_epochs": {"type": "integer", "minimum": 1},
})
_CLASSIF_DEFAULT = {"anchors": [[0.0, -1.0], [0.0, 0.8]], "anchor_labels": [1, -1], "k": 100,
                    "neighbor_steps": None, "heatmap_every": 5, "margin_epochs": 500}
_CLASSIF_BASE = {"seed": 0, "model": {"layer_widths": [2, 32, 32, 1], "activations": ["tanh", "tanh"]},
                 "optimizer": {"kind": "sgd", "eta": 0.1, "steps": 6000, "batch_size": 32},
                 "record_stride": 600, "params": _CLASSIF_DEFAULT}

_REG_PARAMS = _obj({"etas": _ETAS, "T": _POS, "test_points": _POINTS, "band": _BAND,
                    "relative_tolerance": _POS})
_REG_BASE = {"seed": 0, "model": _TANH32, "optimizer": {"kind": "gd", "eta": 0.01, "steps": 2000},
             "record_stride": 100}

_MC_PARAMS = {"etas": _ETAS, "T": _POS, "n_seeds": _SEEDS, "test_points": _POINTS, "band": _BAND, "gate": _POS,
              "estimator": _EST}
_SGD_BASE = {"seed": 0, "optimizer": {"kind": "sgd", "eta": 0.04, "steps": 25, "batch_size": 4, "seed": 1},
             "record_stride": 1}

BUILTINS = {b.name: b for b in [
    Builtin("circle-sgd", "Kernel-neighbour sharpening, CKA, tangent separability and PCA on the circle/disk task.",
            "final normalised-kernel homogeneity beats Euclidean and initial values at both anchors; CKA rises; "
            "tangent features separate at least as well as inputs", 5,
            {**_CLASSIF_BASE, "dataset": {"kind": "circle_disk", "n_per_class": 500, "seed": 0}},
            _CLASSIF_PARAMS, _classification),
    Builtin("ellipse", "The circle/disk pipeline on the anisotropic ellipse variant.",
            "same checks as circle-sgd", 5,
            {**_CLASSIF_BASE, "dataset": {"kind": "ellipse", "n_per_class": 500, "seed": 0}},
            _CLASSIF_PARAMS, _classification),
    Builtin("sine", "Full-batch path-kernel reconstruction and CKA on the sine regression task.",
            "reconstruction error halves with eta and stays below 1% of the output range; CKA rises", 5,
            {**_REG_BASE, "dataset": _SINE64,
             "params": {"etas": [0.02, 0.01, 0.005], "T": 2.0, "test_points": {"linspace": [-3, 3, 7]},
                        "band": [1.5, 3.0], "relative_tolerance": 0.01}},
            _REG_PARAMS, _regression),
    Builtin("square-wave", "Full-batch path-kernel reconstruction and CKA on the square-wave regression task.",
            "as for sine", 5,
            {**_REG_BASE, "dataset": {"kind": "regression_1d", "function": "square_wave", "n": 64},
             "params": {"etas": [0.02, 0.01, 0.005], "T": 2.0, "test_points": {"linspace": [0, 1, 7]},
                        "band": [1.5, 3.0], "relative_tolerance": 0.01}},
            _REG_PARAMS, _regression),
    Builtin("null-space", "Seed-averaged terminal kernel-range residual of SGD on sine across learning rates.",
            "statistic decreases as eta shrinks; every run passes the stationarity gate", 5,
            {"seed": 0, "dataset": _SINE32, "model": _TANH32,
             "optimizer": {"kind": "sgd", "eta": 0.02, "steps": 1000, "batch_size": 4}, "record_stride": 500,
             "params": {"etas": [0.02, 0.01, 0.005], "T": 20.0, "n_seeds": 128, "window": 0.2,
                        "gate_factor": 10.0}},
            _obj({"etas": _ETAS, "T": _POS, "n_seeds": _SEEDS, "window": _POS, "gate_factor": _POS}), _null_space),
    Builtin("relu-rankgap", "Tangent rank gap of a six-unit ReLU net fitted to y = 2x + 1, with and without a "
            "unit that is dormant on the training inputs.",
            "gap 0 without the dormant unit, gap >= 1 with it, higher extrapolation loss with it, SVD rank equals "
            "the exact rational rank", 2,
            {"seed": 0, "dataset": {"kind": "regression_1d", "function": "linear_2x_plus_1", "n": 100},
             "model": {"layer_widths": [1, 6, 1], "activations": ["relu"]},
             "optimizer": {"kind": "gd", "eta": 0.01, "steps": 3000}, "record_stride": 300,
             "params": {"settings": {"baseline": [1.0] * 6, "dormant": [1.0] * 5 + [2.0]},
                        "baseline": "baseline", "dormant": "dormant",
                        "test_points": {"linspace": [2.0, 2.5, 11]}}},
            _obj({"settings": {"type": "object", "additionalProperties": {"type": "array", "items": _NUM,
                                                                         "minItems": 1}},
                  "baseline": {"type": "string"}, "dormant": {"type": "string"}, "test_points": _POINTS}),
            _rankgap),
    Builtin("weak-order", "Expectation gap between SGD and its diffusion approximation, plus the "
            "Ornstein-Uhlenbeck closed form.",
            "OU mean and variance within 3 standard errors; fitted slope in [0.7, 1.5] or flagged inconclusive", 15,
            {"seed": 0, "dataset": _SINE32, "model": {**_TANH32, "init_scale": 0.1},
             "optimizer": {"kind": "sgd", "eta": 0.1, "steps": 10, "batch_size": 4}, "record_stride": 1,
             "params": {"etas": [0.1, 0.05, 0.025], "T": 1.0, "n_seeds": 500, "n_sub": 5,
                        "test_points": [[0.5], [2.0]], "slope_band": [0.7, 1.5],
                        "ou": {"n_paths": 10000, "dt": 0.001}}},
            _obj({"etas": _ETAS, "T": _POS, "n_seeds": _SEEDS, "n_sub": {"type": "integer", "minimum": 1},
                  "test_points": _POINTS, "slope_band": _BAND,
                  "ou": {"type": "object", "additionalProperties": {"type": "number"}}}), _weak_order),
    Builtin("domingos-sgd", "Expected SGD output against its kernel reconstruction for a linear fit of "
            "y = 2x + 1 under squared loss.",
            "gap ratio per halving in [1.5, 3] with every gap above 5 standard errors", 10,
            {**_SGD_BASE, "dataset": _QUAD, "model": _LINEAR,
             "params": {"etas": [0.04, 0.02, 0.01], "T": 1.0, "n_seeds": 400, "test_points": _QUAD_X,
                        "band": [1.5, 3.0], "gate": 5.0, "estimator": "cv"}},
            _obj(_MC_PARAMS), _domingos_sgd),
    Builtin("domingos-sgd-sine", "Expected SGD output against its kernel reconstruction on the sine task.",
            "as for domingos-sgd", 10,
            {**_SGD_BASE, "dataset": _SINE32, "model": _TANH32,
             "params": {"etas": [0.04, 0.02, 0.01], "T": 1.0, "n_seeds": 400,
                        "test_points": {"linspace": [-3, 3, 5]}, "band": [1.5, 3.0], "gate": 5.0,
                        "estimator": "cv"}},
            _obj(_MC_PARAMS), _domingos_sgd),
    Builtin("domingos-sgdm", "Momentum reconstruction with beta = 0 against the SGD reconstruction.",
            "iterates equal SGD bitwise; reconstruction difference shrinks monotonically with eta", 5,
            {**_SGD_BASE, "dataset": _QUAD, "model": _LINEAR,
             "params": {"etas": [0.04, 0.02, 0.01], "T": 1.0, "n_seeds": 100, "test_points": _QUAD_X}},
            _obj({"etas": _ETAS, "T": _POS, "n_seeds": _SEEDS, "test_points": _POINTS}), _domingos_sgdm),
    Builtin("domingos-rmsprop", "Expected RMSprop output against its preconditioned kernel reconstruction with "
            "beta = 1 - c eta.",
            "gap ratio per halving in [1.5, 3] above 5 standard errors; P = cI kernel equals K / c to 1e-12", 10,
            {**_SGD_BASE, "dataset": _QUAD, "model": _LINEAR,
             "params": {"etas": [0.04, 0.02, 0.01], "T": 1.0, "n_seeds": 800, "test_points": _QUAD_X,
                        "band": [1.5, 3.0], "gate": 5.0, "estimator": "cv", "rate_constant": 10.0,
                        "identity_scales": [0.5, 3.0, 7.25]}},
            _obj({**_MC_PARAMS, "rate_constant": _POS,
                  "identity_scales": {"type": "array", "items": _POS, "minItems": 1}}), _domingos_rmsprop),
    Builtin("domingos-adam", "Expected Adam output against its preconditioned, momentum-weighted kernel "
            "reconstruction with beta1 = 1 - c1 eta^(1 - xi), beta2 = 1 - c2 eta.",
            "gap ratio per quartering in [1.4, 2.8] above 5 standard errors", 10,
            {**_SGD_BASE, "dataset": _QUAD, "model": _LINEAR,
             "params": {"etas": [0.04, 0.01, 0.0025], "T": 1.0, "n_seeds": 400, "test_points": _QUAD_X,
                        "band": [1.4, 2.8], "gate": 5.0, "estimator": "cv", "xi": 0.25, "c1": 1.0, "c2": 1.0,
                        "single_coefficient": "stated",
                        "compare": [{"xi": 0.5, "single_coefficient": "derived"}]}},
            _obj({**_MC_PARAMS, "xi": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                  "c1": _POS, "c2": _POS, "single_coefficient": {"enum": ["stated", "derived"]},
                  "compare": {"type": "array", "items": _obj({
                      "xi": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                      "single_coefficient": {"enum": ["stated", "derived"]}})}},
                 required=sorted(set(_MC_PARAMS) | {"xi", "c1", "c2", "single_coefficient"})),
            _domingos_adam),
    Builtin("cosine-schedule", "Schedule-weighted path-kernel reconstruction under cosine annealing.",
            "kappa = 1 equals the unweighted reconstruction to 1e-12; kappa = 3 error halves with eta", 5,
            {"seed": 0, "dataset": _SINE64, "model": _TANH32, "optimizer": {"kind": "gd", "eta": 0.01, "steps": 100},
             "record_stride": 1,
             "params": {"kappa": 3.0, "etas": [0.0025, 0.00125, 0.000625], "T": 1.0, "identity_eta": 0.01,
                        "test_points": {"linspace": [-3, 3, 7]}, "band": [1.5, 3.0]}},
            _obj({"kappa": {"type": "number", "minimum": 1}, "etas": _ETAS, "T": _POS, "identity_eta": _POS,
                  "test_points": _POINTS, "band": _BAND}), _cosine),
    Builtin("diffusion-toy", "Noise-level locality of the path kernel for a toy denoiser conditioned on a "
            "sinusoidal time embedding.",
            "for every query level the matched-level mean kernel beats the most distant level", 5,
            {"seed": 0, "dataset": {"kind": "diffusion_toy", "n_samples": 64, "n_timesteps": 10, "embed_dim": 8,
                                    "seed": 0},
             "model": {"layer_widths": [9, 32, 32, 1], "activations": ["tanh", "tanh"]},
             "optimizer": {"kind": "sgd", "eta": 0.05, "steps": 2000, "batch_size": 32}, "record_stride": 100,
             "params": {"n_queries": 16, "query_seed": 1}},
            _obj({"n_queries": {"type": "integer", "minimum": 1}, "query_seed": {"type": "integer", "minimum": 0}}),
            _diffusion),
]}


# --- running -------------------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def artifact_checksums(out):
    out = Path(out)
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name not in (MANIFEST, SENTINEL))
    return {p.relative_to(out).as_posix(): sha256_file(p) for p in files}


def _prepare_out(out):
    out = Path(out)
    if out.exists():
        if any(out.iterdir()) and not ((out / MANIFEST).exists() or (out / SENTINEL).exists()):
            raise ConfigError(f"--out: {out} is not empty and holds no previous run; refusing to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True)
    return out


def derived_rates(cfg):
    o = _optimizer(cfg)
    d = {"steps": o.steps, "T": o.horizon}
    if o.kind in ("sgdm", "rmsprop"):
        d["mu"] = o.mu
    if o.kind == "adam":
        d["c1"], d["c2"] = o.c1, o.c2
    if o.kind != "gd":
        d["batch_size"] = o.batch_size
    return d


@dataclass
class RunResult:
    status: int
    manifest: dict | None
    message: str = ""


def run_experiment(config, out, threads=1, seed_override=None):
    """Run a builtin; returns ``RunResult(status, manifest)`` with status 0, 2 (config) or 3 (divergence)."""
    try:
        cfg = resolve_config(config, seed_override)
        out = _prepare_out(out)
    except ConfigError as e:
        return RunResult(2, None, str(e))
    ctx = Context(cfg, out, max(1, int(threads)))
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            checks, summary = BUILTINS[cfg["experiment"]].runner(ctx)
    except (DivergenceError, NonFiniteError, FloatingPointError) as e:
        (out / SENTINEL).write_text(f"divergence: {e}\n")
        return RunResult(3, None, str(e))
    except ConfigError as e:
        (out / SENTINEL).write_text(f"config: {e}\n")
        return RunResult(2, None, str(e))
    except Exception as e:
        (out / SENTINEL).write_text(f"error: {type(e).__name__}: {e}\n")
        raise
    ctx.write_json("summary.json", summary)
    manifest = {
        "experiment": cfg["experiment"],
        "config": cfg,
        "derived": derived_rates(cfg),
        "versions": {"pathkernel": __version__, "numpy": np.__version__,
                     "python": ".".join(platform.python_version_tuple()[:2]),
                     "schema": SCHEMA_VERSION, "trajectory_format": tj.FORMAT_VERSION},
        "checks": checks,
        "artifacts": artifact_checksums(out),
    }
    (out / MANIFEST).write_text(_dumps(manifest))
    return RunResult(0, _jsonable(manifest))


def verify(out):
    """Re-checksum an output tree. Returns ``(ok, problems)``; failed checks count as problems."""
    out = Path(out)
    if (out / SENTINEL).exists():
        return False, [f"{SENTINEL} sentinel present: {(out / SENTINEL).read_text().strip()}"]
    if not (out / MANIFEST).exists():
        return False, [f"no {MANIFEST} in {out}"]
    man = json.loads((out / MANIFEST).read_text())
    now = artifact_checksums(out)
    problems = []
    for name, digest in sorted(man["artifacts"].items()):
        if name not in now:
            problems.append(f"missing: {name}")
        elif now[name] != digest:
            problems.append(f"checksum mismatch: {name}")
    problems += [f"unexpected: {n}" for n in sorted(set(now) - set(man["artifacts"]))]
    problems += [f"check failed: {k}" for k, v in sorted(man.get("checks", {}).items()) if not v]
    return not problems, problems
