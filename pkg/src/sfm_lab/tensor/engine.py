"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small tape: each op returns a new `Tensor` holding its value,
its parents and a closure that pushes the incoming gradient to them.
`backward(loss)` topologically sorts the graph once and runs the closures in
reverse.  Only the operations the models here need are provided.

Storage is float32 by default; the whole graph runs in float64 when fed
float64 inputs/parameters, which is how the finite-difference gradient
checks evaluate a shadow copy of the network.  Reductions accumulate in
float64 regardless of storage dtype.

Convolutions are periodic (circular padding), channels-last internally, and
are lowered to one gather (numba) plus BLAS matmuls.  The input gradient of
a periodic cross-correlation is again a periodic cross-correlation with the
spatially flipped, channel-transposed kernel, so the backward pass reuses
the same fast path instead of a scatter.
"""

from __future__ import annotations

from typing import Any

import numpy as np
from numba import njit

__all__ = [
    "Tensor",
    "UsageError",
    "add",
    "backward",
    "concat",
    "concat_last",
    "constant",
    "conv2d",
    "dropout",
    "matmul",
    "mean_all",
    "mean_axes",
    "mul",
    "nchw_to_nhwc",
    "nhwc_to_nchw",
    "parameter",
    "reshape",
    "scale",
    "silu",
    "sub",
]


class UsageError(RuntimeError):
    """Autodiff misuse: non-scalar loss, missing trace, missing grads."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager: ops inside record no trace (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "_grad_shared")

    def __init__(self, values: np.ndarray, requires_grad: bool = False):
        self.values = values
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._grad_shared = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}, grad={self.requires_grad})"


def constant(values, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=False)


def parameter(values, dtype=np.float32) -> Tensor:
    return Tensor(np.array(values, dtype=dtype), requires_grad=True)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(values, requires_grad=_GRAD_ENABLED and any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._grad_shared = True  # may alias an array another parent also received
    elif t._grad_shared:
        t.grad = t.grad + g
        t._grad_shared = False
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)

    def push(g):
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(g, b.values.shape))

    return _node(a.values + b.values, (a, b), push)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)

    def push(g):
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(-g, b.values.shape))

    return _node(a.values - b.values, (a, b), push)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)

    def push(g):
        _accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    return _node(a.values * b.values, (a, b), push)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.values.dtype.type(s)

    def push(g):
        _accumulate(a, g * s)

    return _node(a.values * s, (a,), push)


def silu(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-a.values))
    sig = sig.astype(a.values.dtype, copy=False)

    def push(g):
        _accumulate(a, g * (sig * (1.0 + a.values * (1.0 - sig))))

    return _node(a.values * sig, (a,), push)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask comes from the supplied stream."""
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must be in [0, 1), got {rate}")
    draws = rng.random(a.values.shape, dtype=np.float32)
    keep = (draws >= rate).astype(a.values.dtype)
    keep *= a.values.dtype.type(1.0 / (1.0 - rate))

    def push(g):
        _accumulate(a, g * keep)

    return _node(a.values * keep, (a,), push)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.values.shape

    def push(g):
        _accumulate(a, g.reshape(old))

    return _node(a.values.reshape(shape), (a,), push)


def _permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(int(i) for i in np.argsort(axes))

    def push(g):
        _accumulate(a, np.ascontiguousarray(g.transpose(inverse)))

    return _node(np.ascontiguousarray(a.values.transpose(axes)), (a,), push)


def nchw_to_nhwc(a: Tensor) -> Tensor:
    return _permute(a, (0, 2, 3, 1))


def nhwc_to_nchw(a: Tensor) -> Tensor:
    return _permute(a, (0, 3, 1, 2))


def concat(parts: list[Tensor], axis: int) -> Tensor:
    sizes = [p.values.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    index: list[Any] = [slice(None)] * parts[0].values.ndim

    def push(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            index[axis] = slice(lo, hi)
            _accumulate(p, np.ascontiguousarray(g[tuple(index)]))

    return _node(np.concatenate([p.values for p in parts], axis=axis), tuple(parts), push)


def concat_last(parts: list[Tensor]) -> Tensor:
    return concat(parts, axis=-1)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def push(g):
        _accumulate(a, g @ b.values.T)
        _accumulate(b, a.values.T @ g)

    return _node(a.values @ b.values, (a, b), push)


# ---------------------------------------------------------------------------
# reductions


def mean_all(a: Tensor) -> Tensor:
    size = a.values.size
    value = np.asarray(np.sum(a.values, dtype=np.float64) / size, dtype=a.values.dtype)

    def push(g):
        _accumulate(a, np.broadcast_to(g / size, a.values.shape).astype(a.values.dtype, copy=False))

    return _node(value, (a,), push)


def mean_axes(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    count = int(np.prod([a.values.shape[i] for i in axes]))
    value = (np.sum(a.values, axis=axes, dtype=np.float64) / count).astype(a.values.dtype)
    expand_shape = tuple(
        1 if i in axes else n for i, n in enumerate(a.values.shape)
    )

    def push(g):
        _accumulate(
            a,
            np.broadcast_to(g.reshape(expand_shape) / count, a.values.shape).astype(
                a.values.dtype, copy=False
            ),
        )

    return _node(value, (a,), push)


# ---------------------------------------------------------------------------
# periodic convolution, channels-last


@njit(fastmath=True, cache=True)
def _gather_windows(x, out, k):
    """out[b*H*W + h*W + w, :] = the k x k neighborhood of x[b, h, w, :], wrapped.

    Serial on purpose: the kernel is memory-bound and alternates with
    multi-threaded BLAS calls; giving it its own thread pool just makes the
    pools fight over cores.
    """
    B, H, W, C = x.shape
    r = k // 2
    for b in range(B):
        for h in range(H):
            base = (b * H + h) * W
            for w in range(W):
                row = base + w
                col = 0
                for dy in range(k):
                    hh = h + dy - r
                    if hh < 0:
                        hh += H
                    elif hh >= H:
                        hh -= H
                    for dx in range(k):
                        ww = w + dx - r
                        if ww < 0:
                            ww += W
                        elif ww >= W:
                            ww -= W
                        src = x[b, hh, ww]
                        for c in range(C):
                            out[row, col + c] = src[c]
                        col += C


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[B,H,W,C] -> [B*H*W, k*k*C] with periodic wrap; k=1 is a free view."""
    b, h, w, c = x.shape
    if k == 1:
        return x.reshape(b * h * w, c)
    out = np.empty((b * h * w, k * k * c), dtype=x.dtype)
    _gather_windows(x, out, k)
    return out


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None, kernel_size: int) -> Tensor:
    """Periodic cross-correlation; x [B,H,W,Cin], w [k,k,Cin,Cout], bias [Cout]."""
    k = kernel_size
    b, h, wdt, c_in = x.values.shape
    if w.values.shape[:3] != (k, k, c_in):
        raise UsageError(f"kernel {w.values.shape} incompatible with input {x.values.shape}")
    c_out = w.values.shape[3]

    cols = _im2col(x.values, k)
    wmat = w.values.reshape(k * k * c_in, c_out)
    y = cols @ wmat
    if bias is not None:
        y += bias.values
    y = y.reshape(b, h, wdt, c_out)
    parents = (x, w) if bias is None else (x, w, bias)

    def push(g):
        gf = np.ascontiguousarray(g.reshape(b * h * wdt, c_out))
        if w.requires_grad:
            _accumulate(w, (cols.T @ gf).reshape(w.values.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, np.sum(gf, axis=0, dtype=np.float64).astype(gf.dtype))
        if x.requires_grad:
            w_rot = np.ascontiguousarray(
                w.values[::-1, ::-1].transpose(0, 1, 3, 2)
            ).reshape(k * k * c_out, c_in)
            gcols = _im2col(gf.reshape(b, h, wdt, c_out), k)
            _accumulate(x, (gcols @ w_rot).reshape(b, h, wdt, c_in))

    return _node(y, parents, push)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate .grad on every parameter reachable from the scalar `loss`."""
    if loss.values.size != 1:
        raise UsageError(f"loss must be scalar, got shape {loss.values.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any parameter (no recorded trace)")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.values)
    loss._grad_shared = False
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node is not loss:
                node.grad = None  # intermediate grads are not retained
