import numpy as np
import pytest

from sfm_lab.errors import ConfigError
from sfm_lab.rng import stream
from sfm_lab.tensor import engine, layers
from sfm_lab.tensor.layers import ConvNetSpec


def tiny_spec(**kw):
    base = dict(in_channels=2, out_channels=1, hidden_channels=6, n_blocks=2,
                kernel_size=3, use_sigma_embedding=True, use_positional_channels=True)
    base.update(kw)
    return ConvNetSpec(**base)


def test_all_zero_parameters_give_zero_output(rng):
    spec = tiny_spec(dropout=0.0)
    params = layers.init_params(spec, stream(0, "init"))
    for name in params.names():
        params[name].values[:] = 0.0
    x = rng.standard_normal((3, 2, 8, 8)).astype(np.float32)
    out = layers.forward(spec, params, x, sigma=np.array([0.1, 1.0, 5.0]))
    assert np.all(out.values == 0.0)


@pytest.mark.parametrize("kernel", [1, 3])
def test_identity_configuration(rng, kernel):
    spec = ConvNetSpec(in_channels=2, out_channels=2, n_blocks=0, kernel_size=kernel)
    params = layers.identity_params(spec)
    x = rng.standard_normal((2, 2, 6, 6)).astype(np.float32)
    out = layers.forward(spec, params, x)
    np.testing.assert_allclose(out.values, x, atol=1e-7)


def test_batch_invariance(rng):
    spec = tiny_spec(dropout=0.0)
    params = layers.init_params(spec, stream(1, "init"))
    x = rng.standard_normal((2, 2, 8, 8)).astype(np.float32)
    sigma = np.array([0.3, 2.0])
    batched = layers.forward(spec, params, x, sigma=sigma).values
    singles = np.concatenate(
        [layers.forward(spec, params, x[i : i + 1], sigma=sigma[i : i + 1]).values
         for i in range(2)]
    )
    np.testing.assert_allclose(batched, singles, atol=1e-6)


def test_forward_is_deterministic(rng):
    spec = tiny_spec(dropout=0.13)
    params = layers.init_params(spec, stream(2, "init"))
    x = rng.standard_normal((2, 2, 8, 8)).astype(np.float32)
    sigma = np.array([1.0, 1.0])
    a = layers.forward(spec, params, x, sigma=sigma, rng=stream(5, "drop"), train=True)
    b = layers.forward(spec, params, x, sigma=sigma, rng=stream(5, "drop"), train=True)
    np.testing.assert_array_equal(a.values, b.values)
    # dropout off at inference regardless of rate
    c = layers.forward(spec, params, x, sigma=sigma)
    d = layers.forward(spec, params, x, sigma=sigma)
    np.testing.assert_array_equal(c.values, d.values)


def test_translation_equivariance_of_allconv_net(rng):
    # no positional channels: a pure conv stack commutes with translations
    spec = tiny_spec(use_positional_channels=False, use_sigma_embedding=False, dropout=0.0)
    params = layers.init_params(spec, stream(3, "init"))
    x = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
    base = layers.forward(spec, params, x).values
    shifted = layers.forward(spec, params, np.roll(x, (3, 5), axis=(2, 3))).values
    np.testing.assert_allclose(shifted, np.roll(base, (3, 5), axis=(2, 3)), atol=1e-6)


def test_sigma_contract_enforced(rng):
    spec = tiny_spec()
    params = layers.init_params(spec, stream(4, "init"))
    x = rng.standard_normal((2, 2, 8, 8)).astype(np.float32)
    with pytest.raises(ConfigError, match="sigma"):
        layers.forward(spec, params, x)  # missing
    spec_plain = tiny_spec(use_sigma_embedding=False)
    params_plain = layers.init_params(spec_plain, stream(4, "init"))
    with pytest.raises(ConfigError, match="sigma"):
        layers.forward(spec_plain, params_plain, x, sigma=np.array([1.0, 1.0]))


def test_channel_mismatch_rejected(rng):
    spec = tiny_spec()
    params = layers.init_params(spec, stream(4, "init"))
    with pytest.raises(ConfigError, match="channels"):
        layers.forward(spec, params, rng.standard_normal((2, 3, 8, 8)).astype(np.float32),
                       sigma=np.array([1.0, 1.0]))


def test_zero_init_head_makes_untrained_net_predict_zero(rng):
    spec = tiny_spec(zero_init_head=True, dropout=0.0)
    params = layers.init_params(spec, stream(6, "init"))
    x = rng.standard_normal((2, 2, 8, 8)).astype(np.float32)
    out = layers.forward(spec, params, x, sigma=np.array([0.5, 0.5]))
    assert np.all(out.values == 0.0)


def test_sigma_features_shape_and_positivity_check():
    feats = layers.sigma_features(np.array([0.002, 1.0, 800.0]))
    assert feats.shape == (3, 64)
    assert np.all(np.abs(feats) <= 1.0)
    with pytest.raises(ConfigError):
        layers.sigma_features(np.array([0.0]))


def test_full_network_gradcheck_float64(rng):
    spec = tiny_spec(dropout=0.0, hidden_channels=4, n_blocks=1)
    params = layers.init_params(spec, stream(7, "init")).copy(dtype=np.float64)
    x = rng.standard_normal((2, 2, 6, 6))
    sigma = np.array([0.7, 1.8])
    target = rng.standard_normal((2, 1, 6, 6))

    def loss_value():
        out = layers.forward(spec, params, engine.constant(x, np.float64), sigma=sigma)
        d = engine.sub(out, engine.constant(target, np.float64))
        return engine.mean_all(engine.mul(d, d))

    loss = loss_value()
    engine.backward(loss)
    coords = stream(8, "coords")
    h = 1e-5
    checked = 0
    for name in params.names():
        t = params[name]
        grads = t.grad
        flat, gflat = t.values.reshape(-1), grads.reshape(-1)
        for i in coords.choice(flat.size, size=min(3, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_value().values)
            flat[i] = orig - h
            lm = float(loss_value().values)
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(fd - gflat[i]) <= 1e-4 * max(abs(fd), abs(gflat[i]), 1e-8)
            checked += 1
    assert checked >= 30
