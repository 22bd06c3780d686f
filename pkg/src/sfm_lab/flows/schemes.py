"""Training steps and samplers for the five schemes.

Every scheme exposes the same two entry points through the `Scheme` wrapper:
`train_step(step, y, x)` returning a `TrainRecord`, and
`sample_ensemble(y, n_members, case_index, seed)` returning member fields.
The evaluation pipeline therefore runs unchanged across schemes.

Losses are mean squared error with per-sample means over elements; the
encoder-based scheme weights each sample by (sigma_z / sigma)^2 and adds the
lambda-weighted residual penalty.  Gradients flow through the encoder both
via the residual inside the perturbed input and via the penalty; sigma_z is
treated as a constant inside the loss and evolves only through its EMA.

Per-step randomness comes from the stream (run_seed, "train", step) in a
fixed draw order: noise levels, then the Gaussian perturbation, then any
dropout masks (encoder first, then denoiser).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, NumericError
from ..rng import stream
from ..tensor import engine, layers
from ..tensor.engine import Tensor, UsageError
from ..tensor.optim import ParamStore, adam_step, ema_update, grad_norm
from .config import AdaptiveNoiseState, SchemeConfig, TrainRecord, sigma_floor
from .models import ModelPair, NetworkConfig, SchemeModels, build_models
from .samplers import edm_euler, flow_euler

__all__ = [
    "OptimizerSettings",
    "Scheme",
    "TrainingAborted",
    "cdm_train_step",
    "cfm_train_step",
    "compute_residual_std",
    "draw_cdm_sigma",
    "corrdiff_train_step",
    "make_scheme",
    "regression_predict",
    "regression_train_step",
    "sfm_sample",
    "sfm_train_step",
]


class TrainingAborted(NumericError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, message: str, record: TrainRecord):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class OptimizerSettings:
    lr: float = 1.0e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1.0e-8
    ema_rate: float = 0.5

    def to_payload(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_payload(cls, payload: dict) -> "OptimizerSettings":
        return cls(**payload)


def _mse_graph(pred: Tensor, target: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean over samples of the per-sample mean squared error, optionally weighted."""
    diff = engine.sub(pred, engine.constant(target, pred.dtype))
    sq = engine.mul(diff, diff)
    if weights is None:
        return engine.mean_all(sq)
    per_sample = engine.mean_axes(sq, tuple(range(1, pred.values.ndim)))
    return engine.mean_all(engine.mul(per_sample, engine.constant(weights, pred.dtype)))


def _apply_updates(pairs: list[ModelPair], opt: OptimizerSettings) -> float:
    stores: list[ParamStore] = []
    for pair in pairs:
        pair.params.fill_missing_grads()
        stores.append(pair.params)
    norm = grad_norm(*stores)
    for pair in pairs:
        if pair.frozen:
            pair.params.zero_grads()
            continue
        adam_step(pair.params, opt.lr, opt.beta1, opt.beta2, opt.eps)
        ema_update(pair.ema, pair.params, opt.ema_rate)
    return norm


def _finish_step(
    step: int,
    loss_value: float,
    denoise_value: float,
    reg_value: float,
    sigma_z: float,
    pairs: list[ModelPair],
    opt: OptimizerSettings,
    loss: Tensor,
) -> TrainRecord:
    if not np.isfinite(loss_value):
        record = TrainRecord(step, denoise_value, reg_value, sigma_z, float("nan"))
        raise TrainingAborted(f"non-finite loss at step {step}", record)
    engine.backward(loss)
    norm = _apply_updates(pairs, opt)
    return TrainRecord(step, denoise_value, reg_value, sigma_z, norm).validate()


def _encode(models: SchemeModels, y: np.ndarray, rng, train: bool) -> Tensor:
    enc = models.encoder
    if enc.frozen:
        with engine.no_grad():
            out = layers.forward(enc.spec, enc.params, engine.constant(y), train=False)
        return engine.constant(out.values)
    return layers.forward(enc.spec, enc.params, engine.constant(y), rng=rng, train=train)


def _denoiser_input(x_sigma: Tensor, y: np.ndarray | None) -> Tensor:
    if y is None:
        return x_sigma
    return engine.concat([x_sigma, engine.constant(y, x_sigma.dtype)], axis=1)


def sfm_train_step(
    models: SchemeModels,
    y: np.ndarray,
    x: np.ndarray,
    noise: AdaptiveNoiseState,
    cfg: SchemeConfig,
    opt: OptimizerSettings,
    rng: np.random.Generator,
    step: int = 0,
) -> TrainRecord:
    """One joint encoder + denoiser update.

    sigma is drawn uniformly in [floor, sigma_z] per sample, the perturbed
    input is x + sigma * (e + eps), and the batch loss is

        mean_b (sigma_z / sigma_b)^2 * mse_b  +  lambda * mean(e^2).

    The adaptive scale updates afterwards from the unnormalized residual
    RMSE of this batch.
    """
    batch = x.shape[0]
    sz = noise.sigma_z
    floor = sigma_floor(cfg.sigma_min, sz)
    sigma = rng.uniform(floor, sz, batch)
    eps = rng.standard_normal(x.shape, dtype=np.float32)

    enc_out = _encode(models, y, rng, train=True)
    x_const = engine.constant(x)
    e = engine.scale(engine.sub(enc_out, x_const), 1.0 / sz)
    sigma_b = engine.constant(sigma.reshape(-1, 1, 1, 1).astype(np.float32))
    x_sigma = engine.add(x_const, engine.mul(engine.add(e, engine.constant(eps)), sigma_b))

    d_in = _denoiser_input(x_sigma, y if cfg.condition_on_y else None)
    den = models.denoiser
    d_out = layers.forward(den.spec, den.params, d_in, sigma=sigma, rng=rng, train=True)

    weights = ((sz / sigma) ** 2).astype(np.float32)
    denoise_loss = _mse_graph(d_out, x, weights)
    mean_e_sq = float(np.mean(np.asarray(enc_out.values - x, dtype=np.float64) ** 2) / sz**2)
    reg_value = cfg.lambda_reg * mean_e_sq
    if cfg.lambda_reg > 0:
        loss = engine.add(denoise_loss, engine.scale(engine.mean_all(engine.mul(e, e)),
                                                     cfg.lambda_reg))
    else:
        loss = denoise_loss

    pairs = [den, models.encoder]
    record = _finish_step(
        step, float(loss.values), float(denoise_loss.values), reg_value, sz, pairs, opt, loss
    )
    batch_rmse = float(np.sqrt(np.mean(np.asarray(x - enc_out.values, dtype=np.float64) ** 2)))
    noise.update(batch_rmse)
    record.sigma_z = noise.sigma_z
    return record


def cfm_train_step(
    models: SchemeModels,
    y: np.ndarray,
    x: np.ndarray,
    cfg: SchemeConfig,
    opt: OptimizerSettings,
    rng: np.random.Generator,
    step: int = 0,
) -> TrainRecord:
    """Noise-to-data interpolant: x_t = (1 - t) eps + t x, sigma = 1 - t."""
    batch = x.shape[0]
    t = rng.uniform(0.0, 1.0, batch)
    sigma = 1.0 - t
    eps = rng.standard_normal(x.shape, dtype=np.float32)
    tb = t.reshape(-1, 1, 1, 1)
    x_t = ((1.0 - tb) * eps + tb * x).astype(np.float32)

    den = models.denoiser
    d_in = _denoiser_input(engine.constant(x_t), y if cfg.condition_on_y else None)
    d_out = layers.forward(den.spec, den.params, d_in, sigma=sigma, rng=rng, train=True)
    loss = _mse_graph(d_out, x)
    return _finish_step(step, float(loss.values), float(loss.values), 0.0, 0.0, [den], opt, loss)


def draw_cdm_sigma(rng: np.random.Generator, cfg: SchemeConfig, batch: int) -> np.ndarray:
    """Per-sample training noise levels, sigma ~ lognormal(mean, std)."""
    return np.exp(rng.normal(cfg.lognormal_mean, cfg.lognormal_std, batch))


def cdm_train_step(
    models: SchemeModels,
    y: np.ndarray,
    x: np.ndarray,
    cfg: SchemeConfig,
    opt: OptimizerSettings,
    rng: np.random.Generator,
    step: int = 0,
) -> TrainRecord:
    """Variance-exploding kernel x + sigma * eps, sigma ~ lognormal."""
    batch = x.shape[0]
    sigma = draw_cdm_sigma(rng, cfg, batch)
    eps = rng.standard_normal(x.shape, dtype=np.float32)
    x_sigma = (x + sigma.reshape(-1, 1, 1, 1) * eps).astype(np.float32)

    den = models.denoiser
    d_in = _denoiser_input(engine.constant(x_sigma), y if cfg.condition_on_y else None)
    d_out = layers.forward(den.spec, den.params, d_in, sigma=sigma, rng=rng, train=True)
    loss = _mse_graph(d_out, x)
    return _finish_step(step, float(loss.values), float(loss.values), 0.0, 0.0, [den], opt, loss)


def regression_train_step(
    models: SchemeModels,
    y: np.ndarray,
    x: np.ndarray,
    opt: OptimizerSettings,
    rng: np.random.Generator,
    step: int = 0,
) -> TrainRecord:
    reg = models.regression
    pred = layers.forward(reg.spec, reg.params, engine.constant(y), rng=rng, train=True)
    loss = _mse_graph(pred, x)
    return _finish_step(step, float(loss.values), 0.0, float(loss.values), 0.0, [reg], opt, loss)


def corrdiff_train_step(
    models: SchemeModels,
    y: np.ndarray,
    x: np.ndarray,
    cfg: SchemeConfig,
    opt: OptimizerSettings,
    rng: np.random.Generator,
    step: int,
    stage1_steps: int,
) -> TrainRecord:
    """Two-stage residual scheme: regression first, then diffusion on residuals."""
    if step < stage1_steps:
        return regression_train_step(models, y, x, opt, rng, step)
    if models.residual_std is None:
        raise UsageError(
            "corrdiff stage 2 started before stage-1 residual statistics were computed"
        )
    reg = models.regression
    with engine.no_grad():
        reg_out = layers.forward(reg.spec, reg.params, engine.constant(y), train=False).values
    std = models.residual_std.reshape(1, -1, 1, 1)
    residual = ((x - reg_out) / std).astype(np.float32)

    batch = x.shape[0]
    sigma = draw_cdm_sigma(rng, cfg, batch)
    eps = rng.standard_normal(x.shape, dtype=np.float32)
    r_sigma = (residual + sigma.reshape(-1, 1, 1, 1) * eps).astype(np.float32)

    den = models.denoiser
    d_in = _denoiser_input(engine.constant(r_sigma), y if cfg.condition_on_y else None)
    d_out = layers.forward(den.spec, den.params, d_in, sigma=sigma, rng=rng, train=True)
    loss = _mse_graph(d_out, residual)
    return _finish_step(step, float(loss.values), float(loss.values), 0.0, 0.0, [den], opt, loss)


def compute_residual_std(
    models: SchemeModels, y_train: np.ndarray, x_train: np.ndarray, batch_size: int = 32
) -> np.ndarray:
    """Per-channel std of (x - regression(y)) over the training set."""
    reg = models.regression
    channels = x_train.shape[1]
    total = np.zeros(channels, dtype=np.float64)
    count = 0
    with engine.no_grad():
        for lo in range(0, x_train.shape[0], batch_size):
            yb = y_train[lo : lo + batch_size]
            xb = x_train[lo : lo + batch_size]
            pred = layers.forward(reg.spec, reg.params, engine.constant(yb), train=False).values
            resid = np.asarray(xb - pred, dtype=np.float64)
            total += np.sum(resid**2, axis=(0, 2, 3))
            count += resid.shape[0] * resid.shape[2] * resid.shape[3]
    std = np.sqrt(total / count)
    if np.any(std <= 0):
        raise NumericError("degenerate residual distribution: zero per-channel std")
    models.residual_std = std.astype(np.float32)
    return models.residual_std


# ---------------------------------------------------------------------------
# sampling


def _denoise_fn(pair: ModelPair, y_batch: np.ndarray | None, use_ema: bool = True):
    params = pair.ema if use_ema else pair.params

    def denoise(xb: np.ndarray, sigma: np.ndarray) -> np.ndarray:
        if y_batch is None:
            inp = xb
        else:
            inp = np.concatenate([xb, y_batch], axis=1)
        with engine.no_grad():
            return layers.forward(pair.spec, params, engine.constant(inp), sigma=sigma).values

    return denoise


def _encoder_values(models: SchemeModels, y_batch: np.ndarray, use_ema: bool = True) -> np.ndarray:
    enc = models.encoder
    params = enc.ema if use_ema else enc.params
    with engine.no_grad():
        return layers.forward(enc.spec, params, engine.constant(y_batch), train=False).values


def sfm_sample(
    models: SchemeModels,
    y: np.ndarray,
    noise: AdaptiveNoiseState,
    cfg: SchemeConfig,
    eps: np.ndarray,
    n_steps: int | None = None,
    use_ema: bool = True,
) -> np.ndarray:
    """Latent z = E(y) + sigma_z * eps, then Euler flow integration to t=1.

    `y` and `eps` are batched [B, C*, H, W]; one sample per row comes back.
    """
    steps = cfg.n_steps if n_steps is None else n_steps
    z = _encoder_values(models, y, use_ema) + noise.sigma_z * eps
    cond = y if cfg.condition_on_y else None
    denoise = _denoise_fn(models.denoiser, cond, use_ema)
    return flow_euler(denoise, z.astype(np.float32), noise.sigma_z, steps)


def cfm_sample(models, y, cfg, eps, n_steps=None, use_ema=True) -> np.ndarray:
    steps = cfg.n_steps if n_steps is None else n_steps
    cond = y if cfg.condition_on_y else None
    denoise = _denoise_fn(models.denoiser, cond, use_ema)
    z = cfg.sigma_max * eps
    return flow_euler(denoise, z.astype(np.float32), cfg.sigma_max, steps)


def cdm_sample(models, y, cfg, eps, n_steps=None, use_ema=True) -> np.ndarray:
    steps = cfg.n_steps if n_steps is None else n_steps
    cond = y if cfg.condition_on_y else None
    denoise = _denoise_fn(models.denoiser, cond, use_ema)
    return edm_euler(denoise, eps, cfg.sigma_max, cfg.sigma_min, steps, cfg.rho)


def corrdiff_sample(models, y, cfg, eps, n_steps=None, use_ema=True) -> np.ndarray:
    """Regression mean plus a denormalized residual sample (additive)."""
    if models.residual_std is None:
        raise UsageError("corrdiff sampling requires trained residual statistics")
    steps = cfg.n_steps if n_steps is None else n_steps
    reg = models.regression
    params = reg.ema if use_ema else reg.params
    with engine.no_grad():
        mean = layers.forward(reg.spec, params, engine.constant(y), train=False).values
    denoise = _denoise_fn(models.denoiser, y if cfg.condition_on_y else None, use_ema)
    residual = edm_euler(denoise, eps, cfg.sigma_max, cfg.sigma_min, steps, cfg.rho)
    return mean + models.residual_std.reshape(1, -1, 1, 1) * residual


def regression_predict(models, y, use_ema: bool = True) -> np.ndarray:
    reg = models.regression
    params = reg.ema if use_ema else reg.params
    with engine.no_grad():
        return layers.forward(reg.spec, params, engine.constant(y), train=False).values


# ---------------------------------------------------------------------------
# unified wrapper


class Scheme:
    """Uniform (train_step, sample_ensemble) surface over the five schemes."""

    def __init__(
        self,
        cfg: SchemeConfig,
        net_cfg: NetworkConfig,
        models: SchemeModels,
        opt: OptimizerSettings,
        run_seed: int,
        total_steps: int,
    ):
        self.cfg = cfg
        self.net_cfg = net_cfg
        self.models = models
        self.opt = opt
        self.run_seed = run_seed
        self.total_steps = total_steps
        self.noise = AdaptiveNoiseState(
            sigma_z=cfg.sigma_z_init,
            beta=cfg.sigma_z_beta,
            adaptive_enabled=cfg.adaptive_sigma_z,
        )
        self.stage1_steps = (
            int(round(cfg.corrdiff_stage1_fraction * total_steps))
            if cfg.scheme == "corrdiff"
            else 0
        )

    @property
    def name(self) -> str:
        return self.cfg.scheme

    def needs_residual_stats(self, step: int) -> bool:
        return (
            self.cfg.scheme == "corrdiff"
            and step >= self.stage1_steps
            and self.models.residual_std is None
        )

    def train_step(self, step: int, y: np.ndarray, x: np.ndarray) -> TrainRecord:
        rng = stream(self.run_seed, "train", step)
        scheme = self.cfg.scheme
        if scheme == "sfm":
            return sfm_train_step(self.models, y, x, self.noise, self.cfg, self.opt, rng, step)
        if scheme == "cfm":
            return cfm_train_step(self.models, y, x, self.cfg, self.opt, rng, step)
        if scheme == "cdm":
            return cdm_train_step(self.models, y, x, self.cfg, self.opt, rng, step)
        if scheme == "regression":
            return regression_train_step(self.models, y, x, self.opt, rng, step)
        return corrdiff_train_step(
            self.models, y, x, self.cfg, self.opt, rng, step, self.stage1_steps
        )

    def n_members_effective(self, requested: int) -> int:
        return 1 if self.cfg.scheme == "regression" else requested

    def sample_ensemble(
        self, y: np.ndarray, n_members: int, case_index: int, seed: int,
        n_steps: int | None = None,
    ) -> np.ndarray:
        """Generate members for one conditioning field y [C*, H, W]."""
        if y.ndim != 3:
            raise ConfigError(f"sample_ensemble expects one case [C, H, W], got {y.shape}")
        scheme = self.cfg.scheme
        if scheme == "regression":
            return regression_predict(self.models, y[None].astype(np.float32))

        m = int(n_members)
        if m < 1:
            raise ConfigError("n_members must be >= 1")
        shape = (self.models.data_channels, *y.shape[1:])
        eps = np.stack(
            [
                stream(seed, "latent", case_index, j).standard_normal(shape, dtype=np.float32)
                for j in range(m)
            ]
        )
        y_batch = np.repeat(y[None].astype(np.float32), m, axis=0)
        if scheme == "sfm":
            return sfm_sample(self.models, y_batch, self.noise, self.cfg, eps, n_steps)
        if scheme == "cfm":
            return cfm_sample(self.models, y_batch, self.cfg, eps, n_steps)
        if scheme == "cdm":
            return cdm_sample(self.models, y_batch, self.cfg, eps, n_steps)
        return corrdiff_sample(self.models, y_batch, self.cfg, eps, n_steps)

    def deterministic_prediction(self, y: np.ndarray) -> np.ndarray | None:
        """Deterministic head used for validation RMSE logs, if the scheme has one."""
        if self.cfg.scheme == "sfm":
            return _encoder_values(self.models, y.astype(np.float32))
        if self.cfg.scheme in ("regression", "corrdiff"):
            return regression_predict(self.models, y.astype(np.float32))
        return None


def make_scheme(
    cfg: SchemeConfig,
    net_cfg: NetworkConfig,
    data_channels: int,
    cond_channels: int,
    run_seed: int,
    total_steps: int,
    opt: OptimizerSettings | None = None,
) -> Scheme:
    models = build_models(cfg, net_cfg, data_channels, cond_channels, run_seed)
    return Scheme(cfg, net_cfg, models, opt or OptimizerSettings(), run_seed, total_steps)
