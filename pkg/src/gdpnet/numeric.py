"""Dense-array layer primitives with hand-written adjoints.

Arrays follow a ``(..., time, channels)`` layout: a single feature map is a
2-D ``(L, C)`` array and a batch is ``(B, L, C)``.  Every ``*_backward``
function returns the gradient w.r.t. its input and, when handed a
:class:`ParamTensor`, accumulates parameter gradients into ``.grad``.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Raised when an array does not have the expected dimension."""

    def __init__(self, op: str, dim: str, expected, got):
        self.op = op
        self.dim = dim
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: dimension '{dim}' expected {expected}, got {got}")


class ParamTensor:
    """A learnable array with paired gradient storage."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"ParamTensor(shape={self.shape}, dtype={self.value.dtype})"


def make_rng(seed) -> np.random.Generator:
    """Deterministic PCG64 generator; identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def _value(p):
    return p.value if isinstance(p, ParamTensor) else np.asarray(p)


def _accumulate(p, g) -> None:
    if isinstance(p, ParamTensor):
        p.grad += g


# ---------------------------------------------------------------------------
# 1-D convolution, 3 taps, "same" zero padding


def conv_output_length(length: int, stride: int) -> int:
    return -(-length // stride)


def _conv_pad(x: np.ndarray, stride: int) -> tuple[np.ndarray, int]:
    length = x.shape[-2]
    lout = conv_output_length(length, stride)
    # taps read positions stride*t + k for k in {-1, 0, 1}
    padded_len = max(stride * (lout - 1) + 3, length + 1)
    xp = np.zeros(x.shape[:-2] + (padded_len, x.shape[-1]), dtype=x.dtype)
    xp[..., 1 : 1 + length, :] = x
    return xp, lout


def conv1d_forward(x, w, b, stride: int = 2) -> np.ndarray:
    """Strided 3-tap convolution along time.

    ``y[t, o] = b[o] + sum_k sum_c x[stride*t + k, c] * w[k + 1, c, o]`` with
    out-of-range taps reading zero, so ``len(y) == ceil(L / stride)``.
    """
    x = np.asarray(x)
    wv, bv = _value(w), _value(b)
    if x.ndim < 2:
        raise ShapeError("conv1d_forward", "x.ndim", ">= 2", x.ndim)
    if x.shape[-2] < 1:
        raise ShapeError("conv1d_forward", "L", ">= 1", x.shape[-2])
    if stride < 1:
        raise ShapeError("conv1d_forward", "stride", ">= 1", stride)
    if wv.ndim != 3 or wv.shape[0] != 3:
        raise ShapeError("conv1d_forward", "w.taps", 3, wv.shape)
    if wv.shape[1] != x.shape[-1]:
        raise ShapeError("conv1d_forward", "Cin", wv.shape[1], x.shape[-1])
    if bv.shape != (wv.shape[2],):
        raise ShapeError("conv1d_forward", "Cout", (wv.shape[2],), bv.shape)
    xp, lout = _conv_pad(x, stride)
    y = np.broadcast_to(bv, x.shape[:-2] + (lout, wv.shape[2])).copy()
    span = stride * (lout - 1) + 1
    for k in range(3):
        y += xp[..., k : k + span : stride, :] @ wv[k]
    return y


def conv1d_backward(grad_y, x, w, b=None, stride: int = 2):
    """Adjoint of :func:`conv1d_forward`; returns ``(grad_x, grad_w, grad_b)``."""
    x = np.asarray(x)
    grad_y = np.asarray(grad_y)
    wv = _value(w)
    xp, lout = _conv_pad(x, stride)
    if grad_y.shape != x.shape[:-2] + (lout, wv.shape[2]):
        raise ShapeError("conv1d_backward", "grad_y", x.shape[:-2] + (lout, wv.shape[2]), grad_y.shape)
    span = stride * (lout - 1) + 1
    gy2 = grad_y.reshape(-1, lout, wv.shape[2])
    grad_w = np.empty_like(wv)
    gxp = np.zeros_like(xp)
    for k in range(3):
        tap = xp[..., k : k + span : stride, :].reshape(-1, wv.shape[1])
        grad_w[k] = tap.T @ gy2.reshape(-1, wv.shape[2])
        gxp[..., k : k + span : stride, :] += grad_y @ wv[k].T
    grad_b = gy2.sum(axis=(0, 1))
    _accumulate(w, grad_w)
    if b is not None:
        _accumulate(b, grad_b)
    grad_x = gxp[..., 1 : 1 + x.shape[-2], :]
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Fully connected


def fc_forward(x, w, b) -> np.ndarray:
    """``y = x @ w + b`` over the last axis."""
    x = np.asarray(x)
    wv, bv = _value(w), _value(b)
    if wv.ndim != 2:
        raise ShapeError("fc_forward", "w.ndim", 2, wv.ndim)
    if x.shape[-1] != wv.shape[0]:
        raise ShapeError("fc_forward", "Cin", wv.shape[0], x.shape[-1])
    if bv.shape != (wv.shape[1],):
        raise ShapeError("fc_forward", "Cout", (wv.shape[1],), bv.shape)
    return x @ wv + bv


def fc_backward(grad_y, x, w, b=None):
    x = np.asarray(x)
    grad_y = np.asarray(grad_y)
    wv = _value(w)
    if grad_y.shape != x.shape[:-1] + (wv.shape[1],):
        raise ShapeError("fc_backward", "grad_y", x.shape[:-1] + (wv.shape[1],), grad_y.shape)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_y.reshape(-1, wv.shape[1])
    grad_w = x2.T @ g2
    grad_b = g2.sum(axis=0)
    _accumulate(w, grad_w)
    if b is not None:
        _accumulate(b, grad_b)
    return grad_y @ wv.T, grad_w, grad_b


# ---------------------------------------------------------------------------
# Activations

ACTIVATIONS = ("relu", "sigmoid", "tanh", "linear")


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x, kind: str) -> np.ndarray:
    x = np.asarray(x)
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "linear":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_backward(grad_y, x, kind: str, y=None) -> np.ndarray:
    """Gradient w.r.t. the pre-activation ``x``; ``y`` may be passed to skip recomputation."""
    grad_y = np.asarray(grad_y)
    if kind == "relu":
        return grad_y * (np.asarray(x) > 0)
    if y is None:
        y = activation(x, kind)
    if kind == "sigmoid":
        return grad_y * y * (1 - y)
    if kind == "tanh":
        return grad_y * (1 - y * y)
    if kind == "linear":
        return grad_y.copy()
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


# ---------------------------------------------------------------------------
# Pooling


def pool_time_avg(x, factor: int) -> np.ndarray:
    """Non-overlapping mean over time; a trailing partial window uses its own size."""
    x = np.asarray(x)
    if factor < 1:
        raise ValueError(f"pool_time_avg: factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    length = x.shape[-2]
    lout = conv_output_length(length, factor)
    full = length // factor
    out = np.empty(x.shape[:-2] + (lout, x.shape[-1]), dtype=x.dtype)
    if full:
        head = x[..., : full * factor, :].reshape(x.shape[:-2] + (full, factor, x.shape[-1]))
        out[..., :full, :] = head.mean(axis=-2)
    if lout > full:
        out[..., full, :] = x[..., full * factor :, :].mean(axis=-2)
    return out


def pool_time_avg_backward(grad_y, input_length: int, factor: int) -> np.ndarray:
    grad_y = np.asarray(grad_y)
    if factor == 1:
        return grad_y.copy()
    full = input_length // factor
    gx = np.empty(grad_y.shape[:-2] + (input_length, grad_y.shape[-1]), dtype=grad_y.dtype)
    if full:
        gx[..., : full * factor, :] = np.repeat(grad_y[..., :full, :] / factor, factor, axis=-2)
    tail = input_length - full * factor
    if tail:
        gx[..., full * factor :, :] = grad_y[..., full : full + 1, :] / tail
    return gx


def pool_channels_max(x) -> np.ndarray:
    """Max over adjacent channel pairs; an odd trailing channel is dropped."""
    x = np.asarray(x)
    c = x.shape[-1]
    if c < 2:
        raise ShapeError("pool_channels_max", "C", ">= 2", c)
    half = c // 2
    return np.maximum(x[..., 0 : 2 * half : 2], x[..., 1 : 2 * half : 2])


def pool_channels_max_backward(grad_y, x) -> np.ndarray:
    x = np.asarray(x)
    half = x.shape[-1] // 2
    even = x[..., 0 : 2 * half : 2]
    odd = x[..., 1 : 2 * half : 2]
    pick_even = even >= odd
    gx = np.zeros_like(x, dtype=np.result_type(grad_y, x))
    gx[..., 0 : 2 * half : 2] = grad_y * pick_even
    gx[..., 1 : 2 * half : 2] = grad_y * ~pick_even
    return gx


# ---------------------------------------------------------------------------
# Finite-difference gradient check


def finite_diff_check(
    loss_fn: Callable[[dict], float],
    params: dict,
    eps: float = 1e-5,
    samples_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
    return_details: bool = False,
):
    """Compare the analytic ``.grad`` of every ParamTensor with central differences.

    ``params`` maps names to :class:`ParamTensor` whose gradients have already
    been populated for ``loss_fn(params)``.  With ``samples_per_tensor`` set,
    only that many randomly chosen coordinates per tensor are probed.

    Returns the worst relative error ``|a - n| / max(1e-8, |a| + |n|)``; with
    ``return_details`` also a ``{name: worst}`` mapping.
    """
    if rng is None:
        rng = make_rng(0)
    worst = 0.0
    per_tensor = {}
    for name, p in params.items():
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        if flat.size == 0:
            continue
        if samples_per_tensor is None or samples_per_tensor >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=samples_per_tensor, replace=False))
        tensor_worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(loss_fn(params))
            flat[i] = orig - eps
            lm = float(loss_fn(params))
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise FloatingPointError(f"non-finite loss while probing {name}[{i}]")
            numeric = (lp - lm) / (2 * eps)
            analytic = float(gflat[i])
            rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            tensor_worst = max(tensor_worst, rel)
        per_tensor[name] = tensor_worst
        worst = max(worst, tensor_worst)
    if return_details:
        return worst, per_tensor
    return worst
