import numpy as np
import pytest

from sfm_lab.flows import NetworkConfig, OptimizerSettings, SchemeConfig, TrainingAborted
from sfm_lab.flows.schemes import (
    compute_residual_std,
    corrdiff_sample,
    draw_cdm_sigma,
    make_scheme,
    regression_predict,
    sfm_train_step,
)
from sfm_lab.rng import stream
from sfm_lab.tensor import engine, layers
from sfm_lab.tensor.engine import UsageError


TINY_NET = NetworkConfig(hidden_channels=6, n_blocks=1, kernel_size=3, dropout=0.0)


def make_batch(rng, batch=4, n=8, relation=None):
    y = rng.standard_normal((batch, 1, n, n)).astype(np.float32)
    x = relation(y) if relation else rng.standard_normal((batch, 1, n, n)).astype(np.float32)
    return y, x.astype(np.float32)


def freeze_identity_encoder(scheme):
    spec = layers.ConvNetSpec(in_channels=1, out_channels=1, n_blocks=0, kernel_size=1)
    params = layers.identity_params(spec)
    pair = scheme.models.encoder
    pair.spec, pair.params, pair.ema, pair.frozen = spec, params, params.copy(), True


class TestSfmStep:
    def test_zero_residual_reduces_to_gaussian_denoising(self, rng):
        """With E(y) = x the loss must equal a directly-computed weighted
        denoising loss on the same draws (the encoder machinery adds nothing)."""
        scheme = make_scheme(SchemeConfig.for_scheme("sfm"), TINY_NET, 1, 1,
                             run_seed=3, total_steps=10)
        freeze_identity_encoder(scheme)
        _, x = make_batch(rng)
        y = x.copy()  # identity encoder then gives E(y) = x, so e = 0

        record = scheme.train_step(0, y, x)

        # reference: plain Gaussian denoising with the same stream
        ref_rng = stream(3, "train", 0)
        sz = scheme.cfg.sigma_z_init
        floor = max(scheme.cfg.sigma_min, 1e-3 * sz)
        sigma = ref_rng.uniform(floor, sz, 4)
        eps = ref_rng.standard_normal(x.shape, dtype=np.float32)
        x_sigma = x + sigma.reshape(-1, 1, 1, 1).astype(np.float32) * eps
        den = scheme.models.denoiser
        # the reference sees the pre-update weights; rebuild them from init
        ref_scheme = make_scheme(SchemeConfig.for_scheme("sfm"), TINY_NET, 1, 1,
                                 run_seed=3, total_steps=10)
        d_out = layers.forward(ref_scheme.models.denoiser.spec,
                               ref_scheme.models.denoiser.params,
                               engine.constant(x_sigma), sigma=sigma,
                               rng=ref_rng, train=True)
        per = np.mean((d_out.values.astype(np.float64) - x) ** 2, axis=(1, 2, 3))
        weights = (sz / sigma) ** 2
        expected = float(np.mean(per * weights))
        assert record.denoise_loss == pytest.approx(expected, rel=1e-5)
        assert record.reg_loss == 0.0

    def test_gradients_flow_into_encoder_without_penalty(self, rng):
        # lambda = 0: the encoder still trains through e inside the perturbed
        # input (needs a step or two, since the zero-initialized denoiser head
        # passes no input gradient until it moves)
        scheme = make_scheme(SchemeConfig.for_scheme("sfm"), TINY_NET, 1, 1,
                             run_seed=0, total_steps=10)
        before = scheme.models.encoder.params["head.w"].values.copy()
        y, x = make_batch(rng)
        for step in range(3):
            scheme.train_step(step, y, x)
        after = scheme.models.encoder.params["head.w"].values
        assert not np.array_equal(before, after)

    def test_adaptive_update_follows_batch_rmse(self, rng):
        scheme = make_scheme(SchemeConfig.for_scheme("sfm"), TINY_NET, 1, 1,
                             run_seed=1, total_steps=10)
        freeze_identity_encoder(scheme)
        y, x = make_batch(rng)
        sz0 = scheme.noise.sigma_z
        beta = scheme.noise.beta
        record = scheme.train_step(0, y, x)
        rmse = float(np.sqrt(np.mean((x - y).astype(np.float64) ** 2)))
        assert scheme.noise.sigma_z == pytest.approx((1 - beta) * sz0 + beta * rmse, rel=1e-6)
        assert record.sigma_z == pytest.approx(scheme.noise.sigma_z)

    def test_adaptive_off_keeps_sigma_fixed(self, rng):
        cfg = SchemeConfig.for_scheme("sfm", adaptive_sigma_z=False, sigma_z_init=0.9)
        scheme = make_scheme(cfg, TINY_NET, 1, 1, run_seed=1, total_steps=10)
        y, x = make_batch(rng)
        for step in range(3):
            scheme.train_step(step, y, x)
        assert scheme.noise.sigma_z == 0.9

    def test_large_lambda_recovers_linear_map(self, rng):
        # x = a*y + b pointwise; the penalty drives the 1x1 encoder onto (a, b)
        a, b = 1.8, -0.4
        # fixed sigma_z: on a noiseless task the adaptive scale would collapse
        # and keep renormalizing e, so the raw penalty could not approach zero
        cfg = SchemeConfig.for_scheme("sfm", lambda_reg=2000.0, adaptive_sigma_z=False)
        scheme = make_scheme(cfg, TINY_NET, 1, 1, run_seed=5, total_steps=900,
                             opt=OptimizerSettings(lr=5e-3))
        for step in range(900):
            if step == 600:
                scheme.opt = OptimizerSettings(lr=3e-4)
            y, x = make_batch(rng, relation=lambda v: a * v + b)
            record = scheme.train_step(step, y, x)
        weight = float(scheme.models.encoder.params["head.w"].values.squeeze())
        bias = float(scheme.models.encoder.params["head.b"].values.squeeze())
        assert weight == pytest.approx(a, abs=1e-2)
        assert bias == pytest.approx(b, abs=1e-2)
        assert record.reg_loss < 1e-3

    def test_non_finite_loss_aborts_with_record(self, rng):
        scheme = make_scheme(SchemeConfig.for_scheme("sfm"), TINY_NET, 1, 1,
                             run_seed=0, total_steps=10)
        y, x = make_batch(rng)
        x[0, 0, 0, 0] = np.inf
        with pytest.raises(TrainingAborted) as exc, np.errstate(invalid="ignore"):
            scheme.train_step(0, y, x)
        assert exc.value.record.step == 0


class TestCfmStep:
    def test_interpolant_endpoints(self, rng):
        x = rng.standard_normal((3, 1, 4, 4))
        eps = rng.standard_normal((3, 1, 4, 4))
        for t, expected in [(1.0, x), (0.0, eps)]:
            x_t = (1 - t) * eps + t * x
            np.testing.assert_allclose(x_t, expected, atol=1e-12)

    def test_untrained_denoiser_predicts_zero_and_one_step_sample_is_zero(self, rng):
        scheme = make_scheme(SchemeConfig.for_scheme("cfm"), TINY_NET, 1, 1,
                             run_seed=2, total_steps=10)
        y = rng.standard_normal((1, 1, 8, 8)).astype(np.float32)
        out = scheme.sample_ensemble(y[0], n_members=2, case_index=0, seed=4, n_steps=1)
        assert np.all(out == 0.0)

    def test_step_trains_denoiser(self, rng):
        scheme = make_scheme(SchemeConfig.for_scheme("cfm"), TINY_NET, 1, 1,
                             run_seed=2, total_steps=10)
        y, x = make_batch(rng)
        r0 = scheme.train_step(0, y, x)
        assert np.isfinite(r0.denoise_loss) and r0.reg_loss == 0.0


class TestCdmStep:
    def test_lognormal_noise_statistics(self):
        cfg = SchemeConfig.for_scheme("cdm")
        draws = draw_cdm_sigma(stream(0, "mc"), cfg, 1_000_000)
        logs = np.log(draws)
        assert np.mean(logs) == pytest.approx(-1.2, abs=0.01)
        assert np.std(logs) == pytest.approx(1.2, abs=0.01)

    def test_zero_sigma_is_identity_kernel(self, rng):
        x = rng.standard_normal((2, 1, 4, 4))
        eps = rng.standard_normal((2, 1, 4, 4))
        np.testing.assert_array_equal(x + 0.0 * eps, x)

    def test_step_runs(self, rng):
        scheme = make_scheme(SchemeConfig.for_scheme("cdm"), TINY_NET, 1, 1,
                             run_seed=2, total_steps=10)
        y, x = make_batch(rng)
        record = scheme.train_step(0, y, x)
        assert np.isfinite(record.denoise_loss)


class TestRegression:
    def test_initial_loss_equals_target_variance(self, rng):
        scheme = make_scheme(SchemeConfig.for_scheme("regression"), TINY_NET, 1, 1,
                             run_seed=0, total_steps=10)
        y, x = make_batch(rng, batch=16)
        record = scheme.train_step(0, y, x)
        variance = float(np.mean(x.astype(np.float64) ** 2))
        assert record.reg_loss == pytest.approx(variance, rel=0.02)

    def test_constant_target_convergence(self, rng):
        scheme = make_scheme(SchemeConfig.for_scheme("regression"), TINY_NET, 1, 1,
                             run_seed=1, total_steps=900, opt=OptimizerSettings(lr=5e-3))
        for step in range(900):
            if step == 600:
                scheme.opt = OptimizerSettings(lr=3e-4)  # settle below the noise floor
            y, _ = make_batch(rng, batch=8)
            x = np.full_like(y, 0.7)
            record = scheme.train_step(step, y, x)
        assert record.reg_loss < 1e-4

    def test_identity_task_heldout_mse(self, rng):
        scheme = make_scheme(SchemeConfig.for_scheme("regression"), TINY_NET, 1, 1,
                             run_seed=2, total_steps=600, opt=OptimizerSettings(lr=3e-3))
        for step in range(600):
            y, _ = make_batch(rng, batch=8)
            scheme.train_step(step, y, y.copy())
        y_held, _ = make_batch(rng, batch=16)
        pred = regression_predict(scheme.models, y_held)
        assert float(np.mean((pred - y_held) ** 2)) < 1e-3


class TestCorrDiff:
    def test_stage_two_requires_residual_stats(self, rng):
        scheme = make_scheme(SchemeConfig.for_scheme("corrdiff"), TINY_NET, 1, 1,
                             run_seed=0, total_steps=10)
        y, x = make_batch(rng)
        with pytest.raises(UsageError, match="stage-1"):
            scheme.train_step(scheme.stage1_steps, y, x)

    def test_stage_one_loss_decreases_on_linear_task(self, rng):
        scheme = make_scheme(SchemeConfig.for_scheme("corrdiff"), TINY_NET, 1, 1,
                             run_seed=1, total_steps=1000, opt=OptimizerSettings(lr=3e-3))
        losses = []
        for step in range(200):
            y, x = make_batch(rng, batch=8, relation=lambda v: 0.5 * v)
            losses.append(scheme.train_step(step, y, x).reg_loss)
        assert np.mean(losses[150:]) < 0.5 * np.mean(losses[:20])

    def test_residual_std_and_additive_composition(self, rng):
        scheme = make_scheme(SchemeConfig.for_scheme("corrdiff"), TINY_NET, 1, 1,
                             run_seed=2, total_steps=40, opt=OptimizerSettings(lr=3e-3))
        y_train = rng.standard_normal((32, 1, 8, 8)).astype(np.float32)
        x_train = (0.5 * y_train).astype(np.float32)
        for step in range(scheme.stage1_steps):
            scheme.train_step(step, y_train[:4], x_train[:4])
        std = compute_residual_std(scheme.models, y_train, x_train)
        assert std.shape == (1,) and np.all(std > 0)

        # final sample = regression + std * residual sample, exactly
        y_case = y_train[:2]
        eps = stream(9, "latent").standard_normal((2, 1, 8, 8), dtype=np.float32)
        sample = corrdiff_sample(scheme.models, y_case, scheme.cfg, eps, n_steps=4)
        mean = regression_predict(scheme.models, y_case)
        from sfm_lab.flows.samplers import edm_euler
        from sfm_lab.flows.schemes import _denoise_fn
        residual = edm_euler(_denoise_fn(scheme.models.denoiser, y_case),
                             eps, scheme.cfg.sigma_max, scheme.cfg.sigma_min, 4,
                             scheme.cfg.rho)
        np.testing.assert_array_equal(sample, mean + std.reshape(1, -1, 1, 1) * residual)

    def test_perfect_regression_gives_degenerate_residuals(self, rng):
        # x is a learnable deterministic function of y: residual std collapses
        scheme = make_scheme(SchemeConfig.for_scheme("corrdiff"), TINY_NET, 1, 1,
                             run_seed=3, total_steps=600, opt=OptimizerSettings(lr=3e-3))
        y_train = rng.standard_normal((64, 1, 8, 8)).astype(np.float32)
        x_train = (1.3 * y_train).astype(np.float32)
        for step in range(scheme.stage1_steps):
            idx = stream(4, "pick", step).integers(0, 64, 8)
            scheme.train_step(step, y_train[idx], x_train[idx])
        std = compute_residual_std(scheme.models, y_train, x_train)
        assert float(std[0]) < 0.12
        sample = scheme.sample_ensemble(y_train[0], 2, case_index=0, seed=0, n_steps=4)
        mean = regression_predict(scheme.models, y_train[:1])[0]
        assert float(np.mean((sample - mean) ** 2)) < 0.1 * float(np.mean(x_train**2))
