"""Minimal dense-tensor core: autodiff, conv layers, Adam, checkpoints."""

from .engine import Tensor, UsageError, backward, constant, parameter
from .layers import ConvNetSpec, forward, identity_params, init_params
from .optim import ParamStore, adam_step, ema_update, grad_norm
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "ConvNetSpec",
    "ParamStore",
    "Tensor",
    "UsageError",
    "adam_step",
    "backward",
    "constant",
    "ema_update",
    "forward",
    "grad_norm",
    "identity_params",
    "init_params",
    "load_checkpoint",
    "parameter",
    "save_checkpoint",
]
