"""Residual convolutional networks for denoisers, encoders and regressors.

One architecture covers all model roles: an input convolution, `n_blocks`
pre-activation residual blocks, and a zero- or Kaiming-initialized 1x1 head.
With ``n_blocks=0`` the network collapses to a single convolution, which is
also how the 1x1-convolution encoder is expressed.  All convolutions pad
periodically, matching the doubly periodic simulation domain.

Noise levels enter through 64 sinusoidal features of log(sigma) passed
through a two-layer projection; each block adds its own linear view of that
embedding as a per-channel bias.  Four fixed sinusoidal coordinate channels
can be appended to the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from . import engine
from .engine import Tensor
from .optim import ParamStore

__all__ = [
    "ConvNetSpec",
    "forward",
    "identity_params",
    "init_params",
    "positional_channels",
    "sigma_features",
]

SIGMA_FEATURES = 64


@dataclass(frozen=True)
class ConvNetSpec:
    in_channels: int
    out_channels: int
    hidden_channels: int = 48
    n_blocks: int = 6
    kernel_size: int = 3
    use_sigma_embedding: bool = False
    use_positional_channels: bool = False
    dropout: float = 0.0
    zero_init_head: bool = False

    def __post_init__(self):
        if self.kernel_size % 2 != 1 or self.kernel_size < 1:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.in_channels < 1 or self.out_channels < 1 or self.hidden_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.n_blocks < 0:
            raise ConfigError("n_blocks must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def total_in_channels(self) -> int:
        return self.in_channels + (4 if self.use_positional_channels else 0)

    def to_payload(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_payload(cls, payload: dict) -> "ConvNetSpec":
        return cls(**payload)


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def init_params(spec: ConvNetSpec, rng: np.random.Generator) -> ParamStore:
    """Kaiming fan-in initialization; the head is zeroed when requested."""
    k, hid = spec.kernel_size, spec.hidden_channels
    c_in = spec.total_in_channels
    store = ParamStore()

    if spec.n_blocks == 0:
        head_in = c_in
    else:
        head_in = hid
        store.add("in.w", _kaiming(rng, (k, k, c_in, hid), k * k * c_in))
        store.add("in.b", np.zeros(hid, dtype=np.float32))
        if spec.use_sigma_embedding:
            store.add("emb.fc1.w", _kaiming(rng, (SIGMA_FEATURES, hid), SIGMA_FEATURES))
            store.add("emb.fc1.b", np.zeros(hid, dtype=np.float32))
            store.add("emb.fc2.w", _kaiming(rng, (hid, hid), hid))
            store.add("emb.fc2.b", np.zeros(hid, dtype=np.float32))
        for i in range(spec.n_blocks):
            store.add(f"block{i}.conv1.w", _kaiming(rng, (k, k, hid, hid), k * k * hid))
            store.add(f"block{i}.conv1.b", np.zeros(hid, dtype=np.float32))
            store.add(f"block{i}.conv2.w", _kaiming(rng, (k, k, hid, hid), k * k * hid))
            store.add(f"block{i}.conv2.b", np.zeros(hid, dtype=np.float32))
            if spec.use_sigma_embedding:
                store.add(f"block{i}.emb.w", _kaiming(rng, (hid, hid), hid))

    head_k = 1 if spec.n_blocks > 0 else spec.kernel_size
    if spec.zero_init_head:
        head_w = np.zeros((head_k, head_k, head_in, spec.out_channels), dtype=np.float32)
    else:
        head_w = _kaiming(rng, (head_k, head_k, head_in, spec.out_channels),
                          head_k * head_k * head_in)
    store.add("head.w", head_w)
    store.add("head.b", np.zeros(spec.out_channels, dtype=np.float32))
    return store


def identity_params(spec: ConvNetSpec) -> ParamStore:
    """Parameters that make an n_blocks=0, C_in==C_out net the identity map."""
    if spec.n_blocks != 0 or spec.total_in_channels != spec.out_channels:
        raise ConfigError("identity mapping needs n_blocks=0 and matching channels")
    k = spec.kernel_size
    w = np.zeros((k, k, spec.in_channels, spec.out_channels), dtype=np.float32)
    center = k // 2
    for c in range(spec.in_channels):
        w[center, center, c, c] = 1.0
    store = ParamStore()
    store.add("head.w", w)
    store.add("head.b", np.zeros(spec.out_channels, dtype=np.float32))
    return store


def sigma_features(sigma: np.ndarray, dtype=np.float32) -> np.ndarray:
    """[B] noise levels -> [B, 64] sinusoidal features of log(sigma)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ConfigError("sigma values must be positive")
    half = SIGMA_FEATURES // 2
    freqs = np.exp(np.linspace(np.log(0.25), np.log(16.0), half))
    phase = np.log(sigma)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1).astype(dtype)


def positional_channels(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """[1, H, W, 4] fixed sinusoidal coordinate channels."""
    ys = 2.0 * np.pi * np.arange(h) / h
    xs = 2.0 * np.pi * np.arange(w) / w
    yg, xg = np.meshgrid(ys, xs, indexing="ij")
    out = np.stack([np.sin(xg), np.cos(xg), np.sin(yg), np.cos(yg)], axis=-1)
    return out[None].astype(dtype)


def forward(
    spec: ConvNetSpec,
    params: ParamStore,
    x: Tensor | np.ndarray,
    sigma: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> Tensor:
    """Apply the network to x [B, C, H, W]; returns [B, C_out, H, W].

    `sigma` ([B]) is required exactly when the spec embeds noise levels.
    `train=True` enables dropout, drawing masks from `rng`.
    """
    if not isinstance(x, Tensor):
        x = engine.constant(x)
    if x.values.ndim != 4:
        raise ConfigError(f"expected [B, C, H, W] input, got shape {x.values.shape}")
    b, c, h, w = x.values.shape
    if c != spec.in_channels:
        raise ConfigError(f"expected {spec.in_channels} input channels, got {c}")
    if spec.use_sigma_embedding and sigma is None:
        raise ConfigError("this network embeds sigma; pass sigma=[B]")
    if not spec.use_sigma_embedding and sigma is not None:
        raise ConfigError("sigma passed to a network without sigma embedding")
    if sigma is not None and np.asarray(sigma).shape != (b,):
        raise ConfigError(f"sigma must have shape [{b}]")
    use_dropout = train and spec.dropout > 0.0
    if use_dropout and rng is None:
        raise ConfigError("training forward with dropout needs an rng")
    dtype = x.values.dtype

    hx = engine.nchw_to_nhwc(x)
    if spec.use_positional_channels:
        pos = np.broadcast_to(positional_channels(h, w, dtype), (b, h, w, 4))
        hx = engine.concat_last([hx, engine.constant(np.ascontiguousarray(pos), dtype)])

    if spec.n_blocks == 0:
        out = engine.conv2d(hx, params["head.w"], params["head.b"], spec.kernel_size)
        return engine.nhwc_to_nchw(out)

    emb = None
    if spec.use_sigma_embedding:
        feats = engine.constant(sigma_features(sigma, dtype), dtype)
        emb = engine.matmul(feats, params["emb.fc1.w"]) + params["emb.fc1.b"]
        emb = engine.silu(emb)
        emb = engine.matmul(emb, params["emb.fc2.w"]) + params["emb.fc2.b"]

    hx = engine.conv2d(hx, params["in.w"], params["in.b"], spec.kernel_size)
    for i in range(spec.n_blocks):
        u = engine.silu(hx)
        u = engine.conv2d(u, params[f"block{i}.conv1.w"], params[f"block{i}.conv1.b"],
                          spec.kernel_size)
        if emb is not None:
            bias = engine.matmul(emb, params[f"block{i}.emb.w"])
            u = u + engine.reshape(bias, (b, 1, 1, spec.hidden_channels))
        u = engine.silu(u)
        if use_dropout:
            u = engine.dropout(u, spec.dropout, rng)
        u = engine.conv2d(u, params[f"block{i}.conv2.w"], params[f"block{i}.conv2.b"],
                          spec.kernel_size)
        hx = hx + u

    hx = engine.silu(hx)
    out = engine.conv2d(hx, params["head.w"], params["head.b"], 1)
    return engine.nhwc_to_nchw(out)
