"""Scheme configuration, adaptive noise state and perturbation kernels.

The five schemes share one configuration surface.  Factory defaults follow
the reference setup: Euler sampling with 50 steps, sigma_min = 0.002
everywhere, sigma_max = 800 for the variance-exploding schemes, 1 for the
noise-to-data flow, and the learned sigma_z for the encoder-based flow.

The perturbation builders here are plain-array forms used by tests and by
reference computations; gradient-carrying versions of the same expressions
live in the schemes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from ..errors import ConfigError

__all__ = [
    "AdaptiveNoiseState",
    "PerturbationBatch",
    "SCHEMES",
    "SchemeConfig",
    "TrainRecord",
    "interpolant_form",
    "perturbation_form",
    "sigma_floor",
]

SCHEMES = ("sfm", "cfm", "cdm", "corrdiff", "regression")


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str
    lambda_reg: float = 0.0
    sigma_min: float = 0.002
    sigma_max: float | None = None  # None for sfm: use learned sigma_z
    n_steps: int = 50
    condition_on_y: bool = True
    encoder_kind: str = "conv1x1"
    adaptive_sigma_z: bool = True
    sigma_z_init: float = 1.0
    sigma_z_beta: float = 0.01
    lognormal_mean: float = -1.2
    lognormal_std: float = 1.2
    rho: float = 7.0
    corrdiff_stage1_fraction: float = 0.4

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.lambda_reg < 0:
            raise ConfigError("lambda_reg must be >= 0")
        if self.sigma_min <= 0:
            raise ConfigError("sigma_min must be positive")
        if self.sigma_max is not None and self.sigma_max <= self.sigma_min:
            raise ConfigError("sigma_max must exceed sigma_min")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.encoder_kind not in ("conv1x1", "convnet"):
            raise ConfigError(f"unknown encoder_kind {self.encoder_kind!r}")
        if not 0 < self.sigma_z_beta < 1:
            raise ConfigError("sigma_z_beta must lie in (0, 1)")
        if self.sigma_z_init <= 0:
            raise ConfigError("sigma_z_init must be positive")
        if not 0 < self.corrdiff_stage1_fraction < 1:
            raise ConfigError("corrdiff_stage1_fraction must lie in (0, 1)")

    @classmethod
    def for_scheme(cls, scheme: str, **overrides: Any) -> "SchemeConfig":
        """Construct with the scheme's enforced defaults, then apply overrides."""
        defaults: dict[str, Any] = {"scheme": scheme}
        if scheme == "cfm":
            defaults["sigma_max"] = 1.0
        elif scheme in ("cdm", "corrdiff"):
            defaults["sigma_max"] = 800.0
        elif scheme == "sfm":
            defaults["sigma_max"] = None
            # best 1x1-encoder configuration: no conditioning, no penalty
            defaults["condition_on_y"] = False
            defaults["lambda_reg"] = 0.0
        defaults.update(overrides)
        cfg = cls(**defaults)
        if scheme == "sfm" and cfg.encoder_kind == "convnet" and "lambda_reg" not in overrides:
            cfg = replace(cfg, lambda_reg=0.25)
        if scheme == "sfm" and cfg.encoder_kind == "convnet" and "condition_on_y" not in overrides:
            cfg = replace(cfg, condition_on_y=True)
        return cfg

    def to_payload(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_payload(cls, payload: dict) -> "SchemeConfig":
        return cls(**payload)


@dataclass
class AdaptiveNoiseState:
    """The scalar latent noise scale and its EMA bookkeeping."""

    sigma_z: float
    beta: float = 0.01
    last_batch_rmse: float = float("nan")
    adaptive_enabled: bool = True

    def __post_init__(self):
        if not self.sigma_z > 0:
            raise ConfigError(f"sigma_z must be positive, got {self.sigma_z}")
        if not 0 < self.beta < 1:
            raise ConfigError("beta must lie in (0, 1)")

    def update(self, batch_rmse: float) -> float:
        """EMA toward the latest batch estimate; no-op when adaptation is off."""
        if not np.isfinite(batch_rmse) or batch_rmse < 0:
            raise ConfigError(f"invalid batch RMSE {batch_rmse}")
        self.last_batch_rmse = float(batch_rmse)
        if self.adaptive_enabled:
            self.sigma_z = (1.0 - self.beta) * self.sigma_z + self.beta * self.last_batch_rmse
            if not (np.isfinite(self.sigma_z) and self.sigma_z > 0):
                raise ConfigError(f"sigma_z left the positive range: {self.sigma_z}")
        return self.sigma_z


@dataclass
class TrainRecord:
    step: int
    denoise_loss: float
    reg_loss: float
    sigma_z: float
    grad_norm: float

    def validate(self) -> "TrainRecord":
        for name in ("denoise_loss", "reg_loss", "sigma_z", "grad_norm"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"non-finite {name} in train record at step {self.step}")
        return self


def sigma_floor(sigma_min: float, sigma_z: float) -> float:
    """Lower edge of the training noise range.

    Uniform sampling down to 0 makes the (sigma_z/sigma)^2 loss weight
    diverge, so the draw is floored at max(sigma_min, 1e-3 * sigma_z).
    """
    return max(sigma_min, 1e-3 * sigma_z)


@dataclass
class PerturbationBatch:
    """One realized batch of the encoder-based perturbation kernel."""

    x: np.ndarray
    y: np.ndarray
    e: np.ndarray
    sigma: np.ndarray  # [B]
    eps: np.ndarray
    x_sigma: np.ndarray
    t: np.ndarray  # [B], flow time with sigma = (1 - t) * sigma_z


def perturbation_form(
    x: np.ndarray,
    y: np.ndarray,
    encoder_out: np.ndarray,
    eps: np.ndarray,
    sigma: np.ndarray,
    sigma_z: float,
) -> PerturbationBatch:
    """x_sigma = x + sigma * (e + eps) with e = (E(y) - x) / sigma_z."""
    sigma = np.asarray(sigma)
    e = (encoder_out - x) / sigma_z
    sig = sigma.reshape(-1, *([1] * (x.ndim - 1)))
    x_sigma = x + sig * (e + eps)
    return PerturbationBatch(
        x=x, y=y, e=e, sigma=sigma, eps=eps, x_sigma=x_sigma, t=1.0 - sigma / sigma_z
    )


def interpolant_form(
    x: np.ndarray,
    encoder_out: np.ndarray,
    eps: np.ndarray,
    t: np.ndarray,
    sigma_z: float,
) -> np.ndarray:
    """x_t = (1 - t) E(y) + t x + (1 - t) sigma_z eps; equals the kernel above."""
    tb = np.asarray(t).reshape(-1, *([1] * (x.ndim - 1)))
    return (1.0 - tb) * encoder_out + tb * x + (1.0 - tb) * sigma_z * eps
