"""Model containers: which networks each scheme trains and how they are built."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..errors import ConfigError
from ..rng import stream
from ..tensor import layers
from ..tensor.layers import ConvNetSpec
from ..tensor.optim import ParamStore
from .config import SchemeConfig

__all__ = ["NetworkConfig", "ModelPair", "SchemeModels", "build_models"]


@dataclass(frozen=True)
class NetworkConfig:
    """Desk-scale stand-in sizes for the denoiser / encoder / regressor."""

    hidden_channels: int = 48
    n_blocks: int = 6
    kernel_size: int = 3
    dropout: float = 0.13

    def to_payload(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_payload(cls, payload: dict) -> "NetworkConfig":
        return cls(**payload)


@dataclass
class ModelPair:
    """A network spec with live and EMA parameter stores."""

    spec: ConvNetSpec
    params: ParamStore
    ema: ParamStore
    frozen: bool = False


@dataclass
class SchemeModels:
    """The trainable pieces of one scheme; unused roles stay None."""

    data_channels: int  # C: target channels
    cond_channels: int  # C_in: conditioning channels
    denoiser: ModelPair | None = None
    encoder: ModelPair | None = None
    regression: ModelPair | None = None
    residual_std: np.ndarray | None = None  # [C], set between the two stages

    def pairs(self) -> list[tuple[str, ModelPair]]:
        out = []
        for name in ("denoiser", "encoder", "regression"):
            pair = getattr(self, name)
            if pair is not None:
                out.append((name, pair))
        return out

    def trainable(self) -> list[ParamStore]:
        return [p.params for _, p in self.pairs() if not p.frozen]


def _pair(spec: ConvNetSpec, rng: np.random.Generator) -> ModelPair:
    params = layers.init_params(spec, rng)
    return ModelPair(spec=spec, params=params, ema=params.copy())


def denoiser_spec(cfg: SchemeConfig, net: NetworkConfig, data_channels: int,
                  cond_channels: int) -> ConvNetSpec:
    in_ch = data_channels + (cond_channels if cfg.condition_on_y else 0)
    return ConvNetSpec(
        in_channels=in_ch,
        out_channels=data_channels,
        hidden_channels=net.hidden_channels,
        n_blocks=net.n_blocks,
        kernel_size=net.kernel_size,
        use_sigma_embedding=True,
        use_positional_channels=True,
        dropout=net.dropout,
        zero_init_head=True,
    )


def encoder_spec(cfg: SchemeConfig, net: NetworkConfig, data_channels: int,
                 cond_channels: int) -> ConvNetSpec:
    if cfg.encoder_kind == "conv1x1":
        return ConvNetSpec(
            in_channels=cond_channels,
            out_channels=data_channels,
            n_blocks=0,
            kernel_size=1,
        )
    return ConvNetSpec(
        in_channels=cond_channels,
        out_channels=data_channels,
        hidden_channels=net.hidden_channels,
        n_blocks=net.n_blocks,
        kernel_size=net.kernel_size,
        use_sigma_embedding=False,
        use_positional_channels=True,
        dropout=net.dropout,
    )


def regression_spec(net: NetworkConfig, data_channels: int, cond_channels: int) -> ConvNetSpec:
    return ConvNetSpec(
        in_channels=cond_channels,
        out_channels=data_channels,
        hidden_channels=net.hidden_channels,
        n_blocks=net.n_blocks,
        kernel_size=net.kernel_size,
        use_sigma_embedding=False,
        use_positional_channels=True,
        dropout=net.dropout,
        zero_init_head=True,  # untrained model is the zero predictor
    )


def build_models(
    cfg: SchemeConfig,
    net: NetworkConfig,
    data_channels: int,
    cond_channels: int,
    seed: int,
) -> SchemeModels:
    models = SchemeModels(data_channels=data_channels, cond_channels=cond_channels)
    if cfg.scheme in ("sfm", "cfm", "cdm", "corrdiff"):
        models.denoiser = _pair(
            denoiser_spec(cfg, net, data_channels, cond_channels),
            stream(seed, "init-denoiser"),
        )
    if cfg.scheme == "sfm":
        models.encoder = _pair(
            encoder_spec(cfg, net, data_channels, cond_channels),
            stream(seed, "init-encoder"),
        )
    if cfg.scheme in ("regression", "corrdiff"):
        models.regression = _pair(
            regression_spec(net, data_channels, cond_channels),
            stream(seed, "init-regression"),
        )
    return models
