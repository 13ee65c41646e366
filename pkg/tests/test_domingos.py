import math

import numpy as np
import pytest

from pathkernel.autodiff import ModelSpec, forward, init_params, jacobian
from pathkernel.datagen import Dataset, make_diffusion_toy, make_regression_1d
from pathkernel.domingos import (
    adam_prefactor,
    diffusion_toy_reconstruct,
    eta_scaling,
    exponential_cell_weights,
    reconstruct_adam_expected,
    reconstruct_along_path,
    reconstruct_cosine_schedule,
    reconstruct_gd,
    reconstruct_rmsprop_expected,
    reconstruct_sgd_expected,
    reconstruct_sgdm_expected,
)
from pathkernel.kernels import build_preconditioner
from pathkernel.optimizers import OptimizerConfig
from pathkernel.sde import ModelObjective, simulate_sgd_sde
from pathkernel.trajectory import monte_carlo_runs, train_and_record

MODEL = ModelSpec((1, 8, 1), ("tanh",))
DATA = make_regression_1d("sine", 16)
THETA0 = init_params(MODEL, seed=0)
XT = np.array([[-1.5], [0.2], [2.0]])

QMODEL = ModelSpec((1, 1, 1), ("identity",))
QDATA = make_regression_1d("linear_2x_plus_1", 16)
QTHETA0 = init_params(QMODEL, seed=0, bias_std=0.5)


def _runs(kind, n=8, eta=0.05, steps=10, model=MODEL, data=DATA, theta0=THETA0, **kw):
    cfg = OptimizerConfig(kind, eta, steps, batch_size=kw.pop("batch_size", 4), seed=kw.pop("seed", 1), **kw)
    return monte_carlo_runs(model, data, cfg, n, theta0)


def _interpolating():
    # init output is exactly the target everywhere: zero residuals all along
    X = np.linspace(-1, 1, 6)
    ds = Dataset(X, forward(MODEL, THETA0, X[:, None])[:, 0], "interp")
    return ds


def test_zero_steps_returns_initial_output():
    rec = train_and_record(MODEL, DATA, OptimizerConfig("gd", 0.1, 0), theta0=THETA0)
    rep = reconstruct_gd(rec, DATA, XT)
    assert rep.error == 0.0
    np.testing.assert_array_equal(rep.reconstructed, forward(MODEL, THETA0, XT)[:, 0])


@pytest.mark.parametrize("kind", ["gd", "sgd", "sgdm", "rmsprop", "adam"])
def test_zero_residuals_give_no_correction(kind):
    ds = _interpolating()
    f0 = forward(MODEL, THETA0, XT)[:, 0]
    runs = _runs(kind, n=2, data=ds, batch_size=3)
    fn = {"gd": lambda r: reconstruct_gd(r[0], ds, XT), "sgd": lambda r: reconstruct_sgd_expected(r, ds, XT),
          "sgdm": lambda r: reconstruct_sgdm_expected(r, ds, XT),
          "rmsprop": lambda r: reconstruct_rmsprop_expected(r, ds, XT),
          "adam": lambda r: reconstruct_adam_expected(r, ds, XT)}[kind]
    if kind == "gd":
        runs = [train_and_record(MODEL, ds, OptimizerConfig("gd", 0.05, 10), theta0=THETA0)]
    rep = fn(runs)
    np.testing.assert_array_equal(rep.reconstructed, f0)
    assert rep.error == 0.0


def test_gd_error_shrinks_linearly():
    errs = []
    for eta in (0.04, 0.02, 0.01):
        rec = train_and_record(MODEL, DATA, OptimizerConfig("gd", eta, int(round(1 / eta))), theta0=THETA0)
        errs.append(reconstruct_gd(rec, DATA, XT).error)
    for a, b in zip(errs, errs[1:]):
        assert 1.5 <= a / b <= 3


def test_model_linear_in_params_is_exact():
    # f(theta_{k+1}) - f(theta_k) = grad f . step exactly, so only rounding remains
    model = ModelSpec((1, 1), ())
    th = np.array([0.3, -0.2])
    for eta in (0.02, 0.01):
        rec = train_and_record(model, QDATA, OptimizerConfig("gd", eta, int(round(0.5 / eta))), theta0=th)
        assert reconstruct_gd(rec, QDATA, XT).error < 1e-12


def test_kernel_and_gradient_contractions_agree():
    rec = train_and_record(MODEL, DATA, OptimizerConfig("gd", 0.05, 20), theta0=THETA0)
    a = reconstruct_gd(rec, DATA, XT)
    b = reconstruct_gd(rec, DATA, XT, contraction="gradient")
    np.testing.assert_allclose(a.reconstructed, b.reconstructed, rtol=1e-12, atol=1e-12)


def test_reconstruction_on_training_points_uses_residual_form():
    # with squared loss dl/df = 2 (f - y): rebuild by hand at training inputs
    rec = train_and_record(MODEL, DATA, OptimizerConfig("gd", 0.05, 5), theta0=THETA0)
    X = DATA.inputs[:3]
    manual = forward(MODEL, THETA0, X)[:, 0].copy()
    for k in range(5):
        th = rec.params[k]
        Jx, Jn = jacobian(MODEL, th, X), jacobian(MODEL, th, DATA.inputs)
        res = 2 * (forward(MODEL, th, DATA.inputs)[:, 0] - DATA.targets[:, 0])
        manual -= 0.05 * (Jx @ Jn.T @ res) / DATA.n
    np.testing.assert_allclose(reconstruct_gd(rec, DATA, X).reconstructed, manual, rtol=1e-12, atol=1e-13)


def test_full_batch_sgd_matches_gd():
    runs = _runs("sgd", n=2, batch_size=DATA.n)
    rec = train_and_record(MODEL, DATA, OptimizerConfig("gd", 0.05, 10), theta0=THETA0)
    a = reconstruct_sgd_expected(runs, DATA, XT)
    b = reconstruct_gd(rec, DATA, XT)
    assert np.array_equal(a.reconstructed, b.reconstructed)
    assert np.array_equal(a.actual, b.actual)


def test_control_variate_has_zero_mean():
    runs = _runs("sgd", n=400, model=QMODEL, data=QDATA, theta0=QTHETA0, eta=0.05, steps=20)
    _, terms = reconstruct_sgd_expected(runs, QDATA, XT, return_terms=True)
    c = terms.control
    z = np.abs(c.mean(0)) / (c.std(0, ddof=1) / math.sqrt(len(c)))
    assert np.all(z < 4)


def test_stderr_shrinks_as_root_n():
    runs = _runs("sgd", n=256, eta=0.05, steps=10)
    a = reconstruct_sgd_expected(runs[:64], DATA, XT, estimator="plain")
    b = reconstruct_sgd_expected(runs, DATA, XT, estimator="plain")
    ratio = np.array(a.stderr) / np.array(b.stderr)
    assert np.all((ratio >= 1.7) & (ratio <= 2.4))


def test_mismatched_runs_rejected():
    a = _runs("sgd", n=1)
    b = monte_carlo_runs(MODEL, DATA, a[0].config.with_(seed=9), 1, THETA0 + 0.1)
    with pytest.raises(ValueError, match="initial"):
        reconstruct_sgd_expected(a + b, DATA, XT)
    with pytest.raises(ValueError):
        reconstruct_rmsprop_expected(a, DATA, XT)
    with pytest.raises(ValueError):
        reconstruct_gd(_runs("sgd", n=1)[0], DATA, XT)


def test_two_time_needs_stride_one():
    cfg = OptimizerConfig("sgdm", 0.05, 10, batch_size=4)
    recs = monte_carlo_runs(MODEL, DATA, cfg, 2, THETA0, record_stride=2)
    with pytest.raises(ValueError, match="stride"):
        reconstruct_sgdm_expected(recs, DATA, XT)


def test_sgdm_explicit_matches_recursive():
    runs = _runs("sgdm", n=3, beta=0.7)
    for memory in ("exponential", "geometric"):
        a = reconstruct_sgdm_expected(runs, DATA, XT, memory=memory)
        b = reconstruct_sgdm_expected(runs, DATA, XT, memory=memory, mode="explicit")
        np.testing.assert_allclose(a.reconstructed, b.reconstructed, rtol=1e-11, atol=1e-12)


def test_exponential_memory_mass():
    for beta, eta in ((0.0, 0.1), (0.9, 0.01), (0.5, 0.2)):
        mu = (1 - beta) / eta
        r, w0 = exponential_cell_weights(mu, eta)
        assert w0 / (1 - r) == pytest.approx(1 / (1 - beta), rel=1e-12)


def test_sgdm_geometric_memory_is_exact_unrolling():
    # geometric weights reproduce the heavy-ball recursion with full gradients
    model = ModelSpec((1, 1), ())
    runs = _runs("sgdm", n=2, model=model, data=QDATA, theta0=np.array([0.3, -0.2]), beta=0.6, steps=30,
                 batch_size=QDATA.n)
    rep = reconstruct_sgdm_expected(runs, QDATA, XT, memory="geometric", estimator="plain")
    assert rep.error < 1e-12


def test_sgdm_beta_zero_tracks_sgd():
    gaps = []
    for eta in (0.04, 0.02, 0.01):
        cfg = OptimizerConfig("sgdm", eta, int(round(1 / eta)), batch_size=4, seed=0, beta=0.0)
        rm = monte_carlo_runs(QMODEL, QDATA, cfg, 16, QTHETA0)
        rs = monte_carlo_runs(QMODEL, QDATA, cfg.with_(kind="sgd"), 16, QTHETA0)
        assert all(np.array_equal(a.params, b.params) for a, b in zip(rm, rs))
        a = reconstruct_sgdm_expected(rm, QDATA, XT)
        b = reconstruct_sgd_expected(rs, QDATA, XT)
        gaps.append(np.abs(np.subtract(a.reconstructed, b.reconstructed)).max())
    assert gaps[0] > gaps[1] > gaps[2]


def test_rmsprop_huge_epsilon_is_scaled_sgd():
    eps = 1e4
    rr = _runs("rmsprop", n=2, epsilon=eps, eta=1.0)
    rs = _runs("sgd", n=2, eta=1.0 / eps)
    a = reconstruct_rmsprop_expected(rr, DATA, XT)
    b = reconstruct_sgd_expected(rs, DATA, XT)
    np.testing.assert_allclose(a.reconstructed, b.reconstructed, rtol=1e-4)  # sqrt(s) / eps ~ 1e-5


def test_adam_beta1_zero_reduced_formula():
    runs = _runs("adam", n=1, beta1=0.0, beta2=0.95)
    rec = runs[0]
    cfg = rec.config
    for coeff, a_single in (("stated", cfg.c1), ("derived", 1.0)):
        rep = reconstruct_adam_expected(runs, DATA, XT, single_coefficient=coeff)
        manual = forward(MODEL, THETA0, XT)[:, 0].copy()
        for k in range(cfg.steps):
            th = rec.params[k]
            Jx, Jn = jacobian(MODEL, th, XT), jacobian(MODEL, th, DATA.inputs)
            res = 2 * (forward(MODEL, th, DATA.inputs)[:, 0] - DATA.targets[:, 0])
            gL = Jn.T @ res / DATA.n
            P = build_preconditioner(rec, k, timing="applied").diag
            A = adam_prefactor((k + 1) * cfg.eta, cfg.c1, cfg.c2)
            manual -= cfg.eta * A * a_single * (Jx / P) @ gL
        np.testing.assert_allclose(rep.reconstructed, manual, rtol=1e-10, atol=1e-12)


def test_adam_requires_standard_bias_correction():
    runs = _runs("adam", n=1, adam_bias_correction="recursive", steps=3)
    with pytest.raises(ValueError):
        reconstruct_adam_expected(runs, DATA, XT)


def test_cosine_kappa_one_matches_gd():
    a = train_and_record(MODEL, DATA, OptimizerConfig("gd", 0.05, 20, schedule="cosine", kappa=1.0), theta0=THETA0)
    b = train_and_record(MODEL, DATA, OptimizerConfig("gd", 0.05, 20), theta0=THETA0)
    ra, rb = reconstruct_cosine_schedule(a, DATA, XT), reconstruct_gd(b, DATA, XT)
    np.testing.assert_allclose(ra.reconstructed, rb.reconstructed, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        reconstruct_cosine_schedule(b, DATA, XT)
    with pytest.raises(ValueError):
        reconstruct_gd(a, DATA, XT)


def test_cosine_zero_steps():
    rec = train_and_record(MODEL, DATA, OptimizerConfig("gd", 0.05, 0, schedule="cosine", kappa=3.0), theta0=THETA0)
    assert reconstruct_cosine_schedule(rec, DATA, XT).error == 0.0


def test_continuous_surrogate_converges_under_dt_halving():
    obj = ModelObjective(MODEL, DATA, DATA.n, sigma_mode="zero")
    errs = []
    for n in (1, 2, 4, 8):
        p = simulate_sgd_sde(obj, THETA0, 0.05, 0.5, dt=0.05 / n, noise=False, record="dt")
        a, r = reconstruct_along_path(MODEL, DATA, p, XT)
        errs.append(np.abs(a - r).max())
    assert all(x > y for x, y in zip(errs, errs[1:]))


def test_report_export(tmp_path):
    rec = train_and_record(MODEL, DATA, OptimizerConfig("gd", 0.05, 5), theta0=THETA0)
    rep = reconstruct_gd(rec, DATA, XT)
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "x0,actual,reconstructed,abs_error,stderr" and len(lines) == 4
    assert all(e >= 0 for e in rep.abs_error)


def test_relu_model_noted():
    m = ModelSpec((1, 4, 1), ("relu",))
    rec = train_and_record(m, DATA, OptimizerConfig("gd", 0.05, 3), theta0=init_params(m, 0))
    assert any("relu" in n for n in reconstruct_gd(rec, DATA, XT).notes)


def test_eta_scaling_helper(tmp_path):
    def build(eta):
        rec = train_and_record(MODEL, DATA, OptimizerConfig("gd", eta, int(round(1 / eta))), theta0=THETA0)
        return reconstruct_gd(rec, DATA, XT)

    study = eta_scaling("gd", build, [0.04, 0.02, 0.01])
    assert study.passed and len(study.ratios) == 2
    study.to_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().startswith("eta,gap,stderr,ratio")


def test_diffusion_locality_and_self_similarity():
    ds = make_diffusion_toy(16, 4, 4, seed=0)
    m = ModelSpec((5, 8, 1), ("tanh",))
    rec = train_and_record(m, ds, OptimizerConfig("sgd", 0.05, 50, batch_size=8), record_stride=25,
                           theta0=init_params(m, 0))
    rep = diffusion_toy_reconstruct(rec, ds, n_queries=4)
    M = np.array(rep.matrix)
    assert M.shape == (4, 4)
    assert np.all(np.abs(M) <= 1 + 1e-12)
    from pathkernel.kernels import kernel_from_features
    J = jacobian(m, rec.final_params, ds.inputs[:3])
    K, _ = kernel_from_features(J, J, normalize=True)
    np.testing.assert_allclose(np.diag(K), 1.0, rtol=1e-12)
