from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pathkernel.autodiff import ModelSpec, init_params, loss_and_grad
from pathkernel.optimizers import (
    BatchSampler,
    OptimizerConfig,
    cosine_weight,
    init_state,
    sample_batch,
    step,
)


def run(cfg, grads, theta0):
    state = init_state(cfg, theta0)
    out = [state]
    for g in grads:
        state = step(cfg, state, g)
        out.append(state)
    return out


class TestUpdates:
    def test_sgd_hand_computation(self):
        # f = w x on (x=1, y=0), w0 = 1: dl/dw = 2
        cfg = OptimizerConfig("sgd", eta=0.1)
        s = step(cfg, init_state(cfg, np.array([1.0])), np.array([2.0]))
        assert s.params[0] == pytest.approx(0.8, abs=1e-15)
        assert s.step == 1

    def test_sgdm_beta0_is_sgd_bitwise(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=(50, 7))
        theta0 = rng.normal(size=7)
        a = run(OptimizerConfig("sgd", eta=0.05), grads, theta0)
        b = run(OptimizerConfig("sgdm", eta=0.05, beta=0.0), grads, theta0)
        for x, y in zip(a, b):
            assert np.array_equal(x.params, y.params)

    def test_sgdm_telescoping(self):
        rng = np.random.default_rng(1)
        grads = rng.normal(size=(30, 3))
        cfg = OptimizerConfig("sgdm", eta=0.01, beta=0.8)
        states = run(cfg, grads, np.zeros(3))
        m = np.zeros(3)
        for k, g in enumerate(grads):
            m = cfg.beta * m + g
            assert np.array_equal(states[k + 1].momentum, m)
            explicit = sum(cfg.beta ** (k - i) * grads[i] for i in range(k + 1))
            np.testing.assert_allclose(states[k + 1].momentum, explicit, rtol=1e-12)

    def test_adam_first_step_is_sign_like(self):
        g = np.array([0.3, -2.0, 1e-3])
        cfg = OptimizerConfig("adam", eta=0.01)
        s = step(cfg, init_state(cfg, np.zeros(3)), g)
        np.testing.assert_allclose(s.params, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_adam_recursive_variant_first_step(self):
        g = np.array([0.3, -2.0])
        cfg = OptimizerConfig("adam", eta=0.01, adam_bias_correction="recursive")
        s = step(cfg, init_state(cfg, np.zeros(2)), g)
        np.testing.assert_allclose(s.momentum, g, rtol=1e-15)
        np.testing.assert_allclose(s.second_moment, g * g, rtol=1e-15)

    def test_rmsprop_second_moment_nonnegative(self):
        rng = np.random.default_rng(2)
        cfg = OptimizerConfig("rmsprop", eta=0.01, beta=0.9)
        for s in run(cfg, rng.normal(size=(20, 4)), np.ones(4)):
            assert np.all(s.second_moment >= 0)

    def test_nonfinite_update_reports_step(self):
        cfg = OptimizerConfig("sgd", eta=1.0)
        with pytest.raises(FloatingPointError, match="step 0"):
            step(cfg, init_state(cfg, np.zeros(2)), np.array([np.inf, 0.0]))

    def test_derived_rates(self):
        cfg = OptimizerConfig("adam", eta=0.01, beta=0.9, beta1=0.9, beta2=0.99)
        assert cfg.mu == pytest.approx(10.0)
        assert cfg.c1 == pytest.approx(10.0)
        assert cfg.c2 == pytest.approx(1.0)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            OptimizerConfig("lbfgs")
        with pytest.raises(ValueError):
            OptimizerConfig("sgd", beta=1.0)
        with pytest.raises(ValueError):
            OptimizerConfig("sgd", batch_size=5).resolve_batch(3)


class TestCosine:
    def test_endpoints(self):
        assert cosine_weight(10.0, 10.0, 3.0) == pytest.approx(1.0, abs=1e-15)
        assert cosine_weight(0.0, 10.0, 3.0) == 3.0
        assert cosine_weight(5.0, 10.0, 3.0) == pytest.approx(2.0, abs=1e-15)

    @given(kappa=st.floats(1.0, 20.0), T=st.floats(0.1, 100.0))
    def test_monotone(self, kappa, T):
        ts = np.linspace(0, T, 50)
        w = np.array([cosine_weight(t, T, kappa) for t in ts])
        assert np.all(np.diff(w) <= 1e-12)

    def test_per_step_eta(self):
        cfg = OptimizerConfig("gd", eta=0.1, steps=10, schedule="cosine", kappa=3.0)
        assert cfg.step_eta(0) == pytest.approx(0.3)
        assert cfg.step_eta(5) == pytest.approx(0.2)
        const = OptimizerConfig("gd", eta=0.1, steps=10)
        assert all(const.step_eta(k) == 0.1 for k in range(10))


class TestSampler:
    def test_full_batch(self):
        s = BatchSampler(7, 7, seed=3)
        assert np.array_equal(sample_batch(s, 12), np.arange(7))

    def test_replay(self):
        s = BatchSampler(100, 10, seed=9)
        assert np.array_equal(sample_batch(s, 41), sample_batch(s, 41))
        assert not np.array_equal(sample_batch(s, 41), sample_batch(s, 42))

    def test_frequency(self):
        s = BatchSampler(2, 1, seed=0)
        hits = np.array([sample_batch(s, k)[0] for k in range(10_000)])
        assert abs(hits.mean() - 0.5) <= 0.02

    def test_subset_uniformity(self):
        s = BatchSampler(5, 2, seed=1)
        counts = {}
        n = 20_000
        for k in range(n):
            key = tuple(sample_batch(s, k))
            counts[key] = counts.get(key, 0) + 1
        assert len(counts) == 10
        freq = np.array(list(counts.values())) / n
        # binomial sd for p = 0.1 is 0.0021
        assert np.all(np.abs(freq - 0.1) < 5 * 0.0022)

    def test_b_larger_than_n(self):
        with pytest.raises(ValueError):
            BatchSampler(3, 4)

    @settings(max_examples=20, deadline=None)
    @given(N=st.integers(2, 8), data=st.data())
    def test_minibatch_gradient_unbiased(self, N, data):
        B = data.draw(st.integers(1, N))
        model = ModelSpec((1, 3, 1), ("tanh",))
        rng = np.random.default_rng(N * 31 + B)
        theta = init_params(model, seed=N)
        X, Y = rng.normal(size=(N, 1)), rng.normal(size=N)
        full = loss_and_grad(model, theta, X, Y).grad
        subs = [loss_and_grad(model, theta, X[list(c)], Y[list(c)]).grad for c in combinations(range(N), B)]
        np.testing.assert_allclose(np.mean(subs, axis=0), full, rtol=1e-12, atol=1e-14)
