import csv

import numpy as np
import pytest

from itrefine.base import BaseOperatorSpec, EllipticProblem
from itrefine.data import generate_dataset
from itrefine.errors import ConfigError, DivergenceError
from itrefine.field import fft_forward, folded_frequencies
from itrefine.losses import (
    LossWeights,
    fixed_point_loss,
    lambda_schedule,
    spatial_loss,
    spectral_loss_grad,
    spectral_loss_step,
    spectral_weight,
    total_loss,
    unrolled_loss,
)
from itrefine.mlp import MlpParams, init_params, linear_params, phi
from itrefine.train import (
    OptimizerState,
    TrainConfig,
    clip_by_global_norm,
    learning_rate,
    optimizer_step,
    train,
)

W = LossWeights()


def small_params(seed, n=8, hidden=16):
    rng = np.random.default_rng(seed)
    p = init_params(seed, hidden, n, gain=1.0)
    return MlpParams(p.weights, [0.2 * rng.standard_normal(len(b)) for b in p.biases], p.activations)


class TestSchedules:
    def test_lambda_endpoints_and_midpoint(self):
        assert lambda_schedule(1, 4, W) == 1.0
        assert lambda_schedule(4, 4, W) == 2.0
        assert lambda_schedule(2, 4, W) == pytest.approx(4 / 3, abs=1e-15)
        assert lambda_schedule(1, 1, W) == 1.0
        with pytest.raises(ConfigError):
            lambda_schedule(0, 4, W)

    def test_spectral_weight(self):
        assert spectral_weight(0, 64, 1.5) == 1.0
        assert spectral_weight(64, 64, 1.5) == 2.0
        assert spectral_weight(32, 64, 2.0) == 1.25

    def test_warmup(self):
        w = LossWeights(beta_spectral=0.1, spectral_warmup_epochs=5)
        np.testing.assert_allclose([w.beta_spectral_at(t) for t in (1, 3, 5, 9)], [0.02, 0.06, 0.1, 0.1])
        assert LossWeights(spectral_warmup_epochs=0).beta_spectral_at(1) == 0.1

    def test_weights_validation(self):
        with pytest.raises(ConfigError):
            LossWeights(lambda_start=2.0, lambda_end=1.0)
        with pytest.raises(ConfigError):
            LossWeights(beta_fp=-1.0)

    def test_cosine_lr(self):
        cfg = TrainConfig(epochs=11, lr=1e-3, min_lr=1e-5)
        assert learning_rate(0, cfg) == pytest.approx(1e-3)
        assert learning_rate(10, cfg) == pytest.approx(1e-5)
        assert learning_rate(5, cfg) == pytest.approx(0.5 * (1e-3 + 1e-5))
        assert learning_rate(7, TrainConfig(lr_schedule="constant", lr=2e-4)) == 2e-4


class TestSpectralLoss:
    def test_identity_and_sign_blindness(self):
        y = np.random.default_rng(0).standard_normal(16)
        assert spectral_loss_step(y, y, 1.5) == 0.0
        assert spectral_loss_step(-y, y, 1.5) == pytest.approx(0.0, abs=1e-24)

    def test_single_nyquist_mode(self):
        n, mu = 16, 3.0
        h = mu / n * np.cos(np.pi * np.arange(n))  # |h_hat[n/2]| = mu
        assert abs(fft_forward(h)[n // 2]) == pytest.approx(mu)
        lam = 1.7
        rho = spectral_weight(folded_frequencies(n), n // 2, lam)
        expected = (1 / n) * (rho[n // 2] / rho.mean()) * mu**2
        assert spectral_loss_step(h, np.zeros(n), lam) == pytest.approx(expected, rel=1e-13)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        h, y = rng.standard_normal((2, 16))
        g = spectral_loss_grad(h, y, 1.3)
        fd = np.empty(16)
        for i in range(16):
            e = np.zeros(16)
            e[i] = 1e-6
            fd[i] = (spectral_loss_step(h + e, y, 1.3) - spectral_loss_step(h - e, y, 1.3)) / 2e-6
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


class TestSimpleLosses:
    def test_spatial(self):
        y = np.zeros(8)
        assert spatial_loss(np.stack([y, y, y]), y) == 0.0
        assert spatial_loss(np.stack([y, y + 1]), y) == 1.0
        traj = np.stack([y, np.full(8, np.sqrt(0.4)), np.full(8, np.sqrt(0.2))])
        assert spatial_loss(traj, y) == pytest.approx(0.3)

    def test_h0_excluded(self):
        y = np.zeros(8)
        assert spatial_loss(np.stack([y + 100.0, y]), y) == 0.0

    def test_fixed_point(self):
        n = 8
        assert fixed_point_loss(init_params(0, 4, n, gain=0.0), np.ones(n), np.ones(n)) == 0.0
        p = linear_params(np.zeros((n, n)), np.zeros((n, n)), np.full(n, 2.0))
        assert fixed_point_loss(p, np.ones(n), np.ones(n)) == 4.0
        assert fixed_point_loss(small_params(3), *np.random.default_rng(0).standard_normal((2, n))) >= 0


class TestTotalLoss:
    n = 8

    def batch(self, seed, B=3):
        return np.random.default_rng(seed).standard_normal((3, B, self.n))

    def test_collapses_to_spatial(self):
        p = small_params(0)
        x, y, h0 = self.batch(1)
        cfg = TrainConfig(K=3, alpha=0.3)
        total, bd = total_loss(p, x, y, h0, cfg, LossWeights(beta_spectral=0.0, beta_fp=0.0))
        h, mses = h0, []
        for _ in range(3):
            h = h + 0.3 * phi(p, x, h)
            mses.append(np.mean((h - y) ** 2, axis=-1))
        assert total == pytest.approx(np.mean(mses), rel=1e-13)
        assert bd.spatial == total

    def test_zero_operator_at_solution(self):
        x, y, _ = self.batch(2)
        total, _ = total_loss(init_params(0, 8, self.n, gain=0.0), x, y, y, TrainConfig(K=4), W)
        assert total == 0.0

    def test_final_step_only(self):
        p = small_params(4)
        x, y, h0 = self.batch(3)
        cfg = TrainConfig(K=4, alpha=0.2, deep_supervision=False)
        _, bd = total_loss(p, x, y, h0, cfg, LossWeights(beta_spectral=0.0))
        h = h0
        for _ in range(4):
            h = h + 0.2 * phi(p, x, h)
        assert bd.spatial == pytest.approx(np.mean((h - y) ** 2), rel=1e-13)
        assert bd.fp == pytest.approx(np.mean(phi(p, x, y) ** 2), rel=1e-13)

    def test_terms_nonnegative(self):
        _, bd = total_loss(small_params(5), *self.batch(5), TrainConfig(K=2), W)
        assert bd.spatial >= 0 and bd.spectral >= 0 and bd.fp >= 0

    @pytest.mark.parametrize("deep", [True, False])
    def test_gradient_through_unroll(self, deep):
        p = small_params(6)
        x, y, h0 = self.batch(6, B=2)
        weights = LossWeights(beta_spectral=0.1, beta_fp=0.5)
        _, grads = unrolled_loss(p, x, y, h0, 0.3, 2, weights, deep)
        flat = p.flat()
        fd = np.empty_like(flat)
        for i in range(len(flat)):
            e = np.zeros_like(flat)
            e[i] = 1e-6
            up = unrolled_loss(p.with_flat(flat + e), x, y, h0, 0.3, 2, weights, deep, need_grad=False)[0].total
            dn = unrolled_loss(p.with_flat(flat - e), x, y, h0, 0.3, 2, weights, deep, need_grad=False)[0].total
            fd[i] = (up - dn) / 2e-6
        g = grads.flat()
        assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_mid_unroll(self):
        n = self.n
        p = linear_params(np.zeros((n, n)), 1e300 * np.eye(n), np.zeros(n))
        x, y, h0 = self.batch(7)
        with pytest.raises(DivergenceError):
            unrolled_loss(p, x, y, h0 + 1.0, 1.0, 3, W)


class TestOptimizer:
    def cfg(self, **kw):
        base = dict(lr=1e-3, weight_decay=0.0, grad_clip=1e9)
        base.update(kw)
        return TrainConfig(**base)

    def test_zero_grad_no_decay(self):
        p = small_params(0)
        new, _, _ = optimizer_step(OptimizerState.zeros_like(p), p, p.zeros_like(), self.cfg())
        assert new.equals(p)

    def test_zero_lr(self):
        p = small_params(1)
        g = small_params(2)
        new, _, _ = optimizer_step(OptimizerState.zeros_like(p), p, g, self.cfg(lr=0.0, weight_decay=0.1))
        assert new.equals(p)

    def test_first_step_magnitude(self):
        p = linear_params(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1))
        g = linear_params(np.zeros((1, 1)), np.zeros((1, 1)), np.ones(1))
        new, state, _ = optimizer_step(OptimizerState.zeros_like(p), p, g, self.cfg())
        assert new.biases[0][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-15)
        assert state.step == 1

    def test_clipping_before_moments(self):
        p = linear_params(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1))
        g = linear_params(np.zeros((1, 1)), np.zeros((1, 1)), np.full(1, 10.0))
        _, state, norm = optimizer_step(OptimizerState.zeros_like(p), p, g, self.cfg(grad_clip=1.0))
        assert norm == 10.0
        assert state.m.biases[0][0] == pytest.approx(0.1)  # (1 - beta1) * clipped grad

    def test_decoupled_weight_decay(self):
        p = linear_params(np.full((1, 1), 2.0), np.zeros((1, 1)), np.zeros(1))
        new, _, _ = optimizer_step(OptimizerState.zeros_like(p), p, p.zeros_like(), self.cfg(weight_decay=0.5))
        assert new.weights[0][0, 0] == pytest.approx(2.0 * (1 - 1e-3 * 0.5))

    def test_non_finite_gradient(self):
        p = small_params(3)
        g = p.scale(np.nan)
        with pytest.raises(DivergenceError):
            clip_by_global_norm(g, 1.0)


class TestTrain:
    prob = EllipticProblem(0.3, 16)
    base = BaseOperatorSpec("truncated", 0.25, 0.05, noise_modes=(0, 8))

    def data(self, count=24):
        return generate_dataset(self.prob, "fourier", 0, count).pairs()

    def cfg(self, **kw):
        base = dict(K=2, epochs=3, batch_size=8, hidden_dim=12, lr=1e-3, seed=1)
        base.update(kw)
        return TrainConfig(**base)

    def test_zero_epochs(self):
        params, log = train(self.data(), self.base, self.prob, self.cfg(epochs=0), W)
        assert params.equals(init_params(1, 12, 16, 0.1))
        assert log.rows == []

    def test_zero_lr_keeps_params_and_losses(self):
        params, log = train(self.data(), self.base, self.prob, self.cfg(lr=0.0, min_lr=0.0, epochs=5), W)
        assert params.equals(init_params(1, 12, 16, 0.1))
        for col in ("L_spatial", "L_spectral", "L_fp"):
            np.testing.assert_allclose(log.column(col), log.column(col)[0], rtol=1e-14)

    def test_deterministic(self):
        a, la = train(self.data(), self.base, self.prob, self.cfg(), W)
        b, lb = train(self.data(), self.base, self.prob, self.cfg(), W)
        assert a.equals(b)
        np.testing.assert_array_equal(la.column("L_total"), lb.column("L_total"))

    def test_fixed_point_term_decreases(self):
        # linear toy Phi = X x + H h + b starting from a pure offset, so Phi(x, y) != 0 initially
        n = 16
        start = linear_params(np.zeros((n, n)), np.zeros((n, n)), np.full(n, 0.5))
        _, log = train(self.data(64), self.base, self.prob, self.cfg(epochs=200, lr=3e-3), W, params=start)
        fp = log.column("L_fp")
        assert fp[-1] < fp[0]
        assert log.column("L_total")[-1] < log.column("L_total")[0]

    def test_descent_on_fixed_batch(self):
        from itrefine.base import base_predict

        x, y = self.data(8)
        h0 = base_predict(self.base, self.prob, x)
        p = small_params(2, n=16, hidden=12)
        state = OptimizerState.zeros_like(p)
        cfg = TrainConfig(lr=1e-6, weight_decay=0.0)
        losses = []
        for _ in range(10):
            bd, g = unrolled_loss(p, x, y, h0, 0.2, 2, W)
            losses.append(bd.total)
            p, state, _ = optimizer_step(state, p, g, cfg)
        assert np.all(np.diff(losses) <= 0)

    def test_empty_dataset(self):
        with pytest.raises(ConfigError):
            train((np.zeros((0, 16)), np.zeros((0, 16))), self.base, self.prob, self.cfg(), W)

    def test_log_csv(self, tmp_path):
        _, log = train(self.data(), self.base, self.prob, self.cfg(), W)
        path = tmp_path / "log.csv"
        log.to_csv(path)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["epoch", "L_total", "L_spatial", "L_spectral", "L_fp", "lr", "grad_norm"]
        assert len(rows) == 4
        assert float(rows[1][1]) == log.rows[0]["L_total"]
