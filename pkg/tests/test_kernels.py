import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pathkernel.autodiff import ModelSpec, init_params, jacobian, per_sample_loss_grads
from pathkernel.datagen import make_regression_1d
from pathkernel.kernels import (
    KernelMatrix,
    batch_noise_covariance,
    build_preconditioner,
    finite_population_factor,
    gradient_kernel,
    gram,
    kernel_from_features,
    matrix_sqrt_psd,
    noise_covariance_from_grads,
    noise_factor,
    path_kernel,
    save_kernel_csv,
    save_kernel_pgm,
)
from pathkernel.optimizers import OptimizerConfig, init_state, step
from pathkernel.trajectory import train_and_record

MODEL = ModelSpec((1, 8, 1), ("tanh",))
DATA = make_regression_1d("sine", 16)
THETA0 = init_params(MODEL, seed=0)
XS = np.linspace(-2, 2, 9)[:, None]


def _record(kind="gd", **kw):
    cfg = OptimizerConfig(kind, eta=kw.pop("eta", 0.05), steps=kw.pop("steps", 20), **kw)
    return train_and_record(MODEL, DATA, cfg, theta0=THETA0)


@given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_gram_symmetric_psd(n, d, seed):
    A = np.random.default_rng(seed).standard_normal((n, d))
    K = gram(A)
    assert np.array_equal(K, K.T)
    lam = np.linalg.eigvalsh(K)
    assert lam.min() >= -1e-8 * max(np.trace(K), 1e-300)
    np.testing.assert_allclose(K, A @ A.T, rtol=1e-12, atol=1e-12)


def test_gram_rows_independent_of_blocking():
    A = np.random.default_rng(1).standard_normal((7, 5))
    full = gram(A, A)
    for i in range(7):
        assert np.array_equal(gram(A[i:i + 1], A)[0], full[i])


def test_plain_kernel_on_record():
    rec = _record()
    K = gradient_kernel(rec, 10, XS)
    assert isinstance(K, KernelMatrix)
    assert np.array_equal(K.values, K.values.T)
    assert np.linalg.eigvalsh(K.values).min() >= -1e-8 * np.trace(K.values)


def test_normalized_kernel_bounds_and_diagonal():
    rec = _record()
    K = gradient_kernel(rec, 20, XS, weighting="normalized").values
    assert np.all(np.abs(K) <= 1 + 1e-12)
    np.testing.assert_array_equal(np.diag(K), 1.0)


def test_zero_gradient_normalisation_flagged():
    F = np.array([[1.0, 0.0], [0.0, 0.0], [0.5, 0.5]])
    K, mask = kernel_from_features(F, normalize=True)
    assert K[1, 1] == 0.0 and mask[1].all() and mask[:, 1].all()
    assert not np.isnan(K).any()


def test_two_time_kernel():
    rec = _record()
    K = gradient_kernel(rec, 5, XS, XS[:3], step_s=15).values
    assert K.shape == (9, 3)
    J5 = jacobian(MODEL, rec.params[5], XS)
    J15 = jacobian(MODEL, rec.params[15], XS[:3])
    np.testing.assert_allclose(K, J5 @ J15.T, rtol=1e-12)


def test_preconditioner_identity_and_scaling():
    F = np.random.default_rng(2).standard_normal((6, 4))
    K, _ = kernel_from_features(F)
    K1, _ = kernel_from_features(F, F, pdiag=np.ones(4))
    assert np.array_equal(K1, K)
    for c in (0.5, 3.0, 7.25):
        Kc, _ = kernel_from_features(F, F, pdiag=np.full(4, c))
        np.testing.assert_allclose(Kc, K / c, rtol=1e-12, atol=1e-12)


def test_rmsprop_preconditioner_step0_is_eps():
    rec = _record("rmsprop", batch_size=4)
    P = build_preconditioner(rec, 0)
    np.testing.assert_array_equal(P.diag, np.full(MODEL.n_params, rec.config.epsilon))
    K = gradient_kernel(rec, 0, XS, weighting="preconditioned").values
    np.testing.assert_allclose(K, gradient_kernel(rec, 0, XS).values / rec.config.epsilon, rtol=1e-12)


def test_rmsprop_preconditioner_constant_gradient_limit():
    cfg = OptimizerConfig("rmsprop", eta=1e-3, steps=0, beta=0.9)
    g = np.array([0.3, -2.0, 1e-3])
    st_ = init_state(cfg, np.zeros(3))
    for _ in range(400):
        st_ = step(cfg, st_, g)
    np.testing.assert_allclose(np.sqrt(st_.second_moment) + cfg.epsilon, np.abs(g) + cfg.epsilon, rtol=1e-12)


def test_adam_preconditioner_uses_time_factor():
    rec = _record("adam", batch_size=4, beta2=0.99)
    cfg = rec.config
    P = build_preconditioner(rec, 5, timing="applied")
    v = rec.applied["second_moment"][5]
    expect = np.sqrt(v) + cfg.epsilon * math.sqrt(-math.expm1(-cfg.c2 * 6 * cfg.eta))
    np.testing.assert_array_equal(P.diag, expect)
    with pytest.raises(ValueError):
        build_preconditioner(rec, 0)  # zero moment and zero time factor


def test_preconditioner_missing_state():
    with pytest.raises(ValueError):
        build_preconditioner(_record("sgd", batch_size=4), 3)


def test_path_kernel_constant_params():
    cfg = OptimizerConfig("gd", eta=0.1, steps=10)
    rec = train_and_record(MODEL, DATA, cfg, theta0=THETA0)
    rec.params[:] = THETA0  # frozen trajectory
    P = path_kernel(rec, XS).values
    K0 = gradient_kernel(rec, 0, XS).values
    np.testing.assert_allclose(P, 1.0 * K0, rtol=1e-12)
    np.testing.assert_allclose(path_kernel(rec, XS, quadrature="trapezoid").values, K0, rtol=1e-12)


def test_path_kernel_kappa_one_matches_unweighted():
    a = train_and_record(MODEL, DATA, OptimizerConfig("gd", 0.05, 20, schedule="cosine", kappa=1.0), theta0=THETA0)
    b = train_and_record(MODEL, DATA, OptimizerConfig("gd", 0.05, 20), theta0=THETA0)
    assert np.array_equal(path_kernel(a, XS).values, path_kernel(b, XS).values)


def test_quadrature_refinement():
    # trapezoid and left Riemann differ by O(stride * eta)
    cfg = OptimizerConfig("gd", eta=0.02, steps=100)
    full = train_and_record(MODEL, DATA, cfg, theta0=THETA0)
    gaps = []
    for s in (20, 10, 5):
        rec = train_and_record(MODEL, DATA, cfg, record_stride=s, theta0=THETA0)
        d = path_kernel(rec, XS, quadrature="trapezoid").values - path_kernel(rec, XS).values
        gaps.append(np.abs(d).max())
    assert full.n_snapshots == 101
    for a, b in zip(gaps, gaps[1:]):
        assert 1.6 < a / b < 2.4


def test_noise_covariance_full_batch_zero():
    S = batch_noise_covariance(MODEL, DATA, THETA0, DATA.n, mode="exact").matrix
    assert np.all(S == 0)
    assert finite_population_factor(5, 5) == 0


def test_noise_covariance_n3_b1():
    G = np.random.default_rng(3).standard_normal((3, 4))
    S = noise_covariance_from_grads(G, 1, mode="exact").matrix
    C = G - G.mean(0)
    np.testing.assert_allclose(S, (C.T @ C) / 3, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("N,B", [(4, 1), (5, 2), (6, 3), (6, 5)])
def test_noise_covariance_analytic_matches_enumeration(N, B):
    G = np.random.default_rng(N * 10 + B).standard_normal((N, 3))
    ex = noise_covariance_from_grads(G, B, mode="exact").matrix
    an = noise_covariance_from_grads(G, B, mode="analytic").matrix
    np.testing.assert_allclose(an, ex, rtol=1e-10, atol=1e-14)
    L = noise_factor(G, B)
    np.testing.assert_allclose(L @ L.T, ex, rtol=1e-10, atol=1e-14)


def test_noise_covariance_sample_within_three_se():
    G = np.random.default_rng(4).standard_normal((6, 3))
    ex = noise_covariance_from_grads(G, 2, mode="exact").matrix
    sm = noise_covariance_from_grads(G, 2, mode="sample", n_draws=20_000, seed=1)
    z = np.abs(sm.matrix - ex) / sm.stderr
    assert z.max() <= 3


def test_noise_covariance_exact_overflow():
    G = np.zeros((40, 2))
    with pytest.raises(ValueError, match="sample"):
        noise_covariance_from_grads(G, 20, mode="exact")


def test_noise_covariance_model_matches_grads():
    _, G, _ = per_sample_loss_grads(MODEL, THETA0, DATA.inputs, DATA.targets)
    a = batch_noise_covariance(MODEL, DATA, THETA0, 4, mode="analytic").matrix
    np.testing.assert_allclose(a, noise_covariance_from_grads(G, 4).matrix, rtol=1e-12)
    assert np.linalg.eigvalsh(a).min() >= -1e-10 * np.trace(a)


def test_matrix_sqrt_examples():
    np.testing.assert_allclose(matrix_sqrt_psd(np.eye(3)), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)
    A = np.random.default_rng(5).standard_normal((5, 3))
    S = A @ A.T
    R = matrix_sqrt_psd(S)
    assert np.linalg.norm(R @ R - S) / np.linalg.norm(S) <= 1e-10
    with pytest.raises(ValueError):
        matrix_sqrt_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_kernel_export(tmp_path):
    rec = _record()
    K = gradient_kernel(rec, 3, XS, weighting="normalized")
    p = save_kernel_csv(K, tmp_path / "k.csv")
    back = np.loadtxt(p, delimiter=",")
    assert np.array_equal(back, K.values)
    save_kernel_pgm(K, tmp_path / "k.pgm")
    raw = (tmp_path / "k.pgm").read_bytes()
    assert raw.startswith(b"P5\n9 9\n255\n") and len(raw) == len(b"P5\n9 9\n255\n") + 81
    assert (tmp_path / "k.json").exists()
