"""Dense-tensor layer primitives with hand-written forward and backward passes.

Everything the residual networks need lives here: 2D/3D "same"-padded
stride-1 convolution (cross-correlation convention), ReLU, batch
normalization, and a central finite-difference gradient estimator used as
the test oracle for every backward pass.

Arrays are plain numpy ndarrays. Convolutions accept either a single
sample ``(C, *spatial)`` or a batch ``(N, C, *spatial)``; batch norm always
requires the batch axis. All ops are pure: batch-norm running-stat
updates are returned as a new state object, never written in place.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.dtype(np.float32)


class ShapeError(ValueError):
    """Invalid argument shape; the message names the offending axis."""


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Set the global precision (float32 or float64) for newly created parameters."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"precision must be float32 or float64, got {dt}")
    _DEFAULT_DTYPE = dt


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the global default precision."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def seeded_rng(seed: int, purpose: int = 0, index: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by a (seed, purpose, index) stream.

    Distinct streams are independent regardless of draw order or thread
    count, which keeps sampling reproducible under any parallelism.
    """
    if purpose < 0 or index < 0 or index >= 1 << 32:
        raise ValueError(f"invalid stream (purpose={purpose}, index={index})")
    return np.random.Generator(np.random.Philox(key=[seed & (1 << 64) - 1, (purpose << 32) + index]))


@dataclass
class ConvKernel:
    """Stride-1 convolution weights: ``(out_channels, in_channels, *spatial)``.

    Spatial extents must be odd in every axis so "same" zero padding is
    symmetric. Rank 2 kernels convolve images, rank 3 kernels volumes.
    """

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim not in (4, 5):
            raise ShapeError(f"kernel weights must have rank 4 (2D) or 5 (3D), got rank {w.ndim}")
        for ax, extent in enumerate(w.shape[2:], start=2):
            if extent % 2 == 0:
                raise ShapeError(f"kernel axis {ax} has even extent {extent}; odd required")
        if np.asarray(self.bias).shape != (w.shape[0],):
            raise ShapeError(
                f"bias axis 0 must match out_channels {w.shape[0]}, got {np.asarray(self.bias).shape}"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def spatial_extent(self) -> tuple:
        return self.weights.shape[2:]

    @property
    def spatial_rank(self) -> int:
        return self.weights.ndim - 2


@dataclass
class BatchNormState:
    """Per-channel batch normalization parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5
    mode: str = "train"  # "train" | "infer"

    def __post_init__(self):
        c = np.asarray(self.gamma).shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if np.asarray(getattr(self, name)).shape != (c,):
                raise ShapeError(f"{name} must have shape ({c},)")
        if self.mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {self.mode!r}")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running_var must be elementwise non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def make_batchnorm(channels: int, momentum: float = 0.9, epsilon: float = 1e-5) -> BatchNormState:
    """Fresh state: gamma 1, beta 0, running mean 0, running var 1."""
    dt = _DEFAULT_DTYPE
    return BatchNormState(
        gamma=np.ones(channels, dtype=dt),
        beta=np.zeros(channels, dtype=dt),
        running_mean=np.zeros(channels, dtype=dt),
        running_var=np.ones(channels, dtype=dt),
        momentum=momentum,
        epsilon=epsilon,
    )


# ---------------------------------------------------------------------------
# convolution


def _conv_prepare(x: np.ndarray, kernel: ConvKernel):
    """Validate shapes, zero-pad, and return the sliding-window view.

    Returns (windows, batched) where windows has shape
    (N, C, *spatial, *kernel_extent); a leading batch axis is added for
    unbatched input.
    """
    rank = kernel.spatial_rank
    x = np.asarray(x)
    if x.ndim == rank + 1:
        batched = False
        xb = x[None]
    elif x.ndim == rank + 2:
        batched = True
        xb = x
    else:
        raise ShapeError(
            f"input rank {x.ndim} incompatible with a {rank}D kernel; "
            f"expected {rank + 1} (single) or {rank + 2} (batched) axes"
        )
    if xb.shape[1] != kernel.in_channels:
        raise ShapeError(
            f"input channel axis has {xb.shape[1]} channels, kernel expects {kernel.in_channels}"
        )
    for ax, (extent, size) in enumerate(zip(kernel.spatial_extent, xb.shape[2:]), start=2):
        if size < 1:
            raise ShapeError(f"input spatial axis {ax} is empty")
    pads = [(0, 0), (0, 0)] + [(e // 2, e // 2) for e in kernel.spatial_extent]
    xpad = np.pad(xb, pads, mode="constant")
    windows = sliding_window_view(xpad, kernel.spatial_extent, axis=tuple(range(2, 2 + rank)))
    return windows, batched


def _conv_subscripts(rank: int):
    """einsum subscripts for the window/weight contractions at a given rank."""
    space = "dhw"[-rank:]
    taps = "zyx"[-rank:]
    return f"nc{space}{taps}", f"oc{taps}", f"n{space}"


def _conv_from_windows(windows: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    rank = kernel.spatial_rank
    win, wgt, out_prefix = _conv_subscripts(rank)
    # contract channel + kernel-offset axes; einsum's direct kernel skips the
    # im2col gather a tensordot would materialize, which dominates here
    out = np.einsum(f"{win},{wgt}->{out_prefix}o", windows, kernel.weights, optimize=True)
    out = np.moveaxis(out, -1, 1)
    return out + kernel.bias.reshape((1, -1) + (1,) * rank)


def conv_forward(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Stride-1 cross-correlation with "same" zero padding.

    Output spatial dims equal input spatial dims;
    ``out[o] = bias[o] + sum_i corr(x[i], weights[o, i])``.
    """
    windows, batched = _conv_prepare(x, kernel)
    out = _conv_from_windows(windows, kernel)
    return out if batched else out[0]


def conv_forward_cached(x: np.ndarray, kernel: ConvKernel):
    """Like :func:`conv_forward` but also returns the window view for reuse
    by :func:`conv_backward_cached` (saves one pad+window pass per step)."""
    windows, batched = _conv_prepare(x, kernel)
    out = _conv_from_windows(windows, kernel)
    return (out if batched else out[0]), (windows, batched)


def _flip_swap(kernel: ConvKernel) -> ConvKernel:
    rank = kernel.spatial_rank
    flipped = kernel.weights[(slice(None), slice(None)) + (slice(None, None, -1),) * rank]
    swapped = np.ascontiguousarray(np.swapaxes(flipped, 0, 1))
    return ConvKernel(weights=swapped, bias=np.zeros(swapped.shape[0], dtype=swapped.dtype))


def conv_backward_cached(cache, kernel: ConvKernel, upstream: np.ndarray):
    windows, batched = cache
    rank = kernel.spatial_rank
    up = np.asarray(upstream)
    upb = up if batched else up[None]
    expected = windows.shape[:1] + (kernel.out_channels,) + windows.shape[2 : 2 + rank]
    if upb.shape != expected:
        raise ShapeError(f"upstream gradient shape {up.shape} does not match forward output")
    # d/dx of sum(upstream * conv(x)) is a same-padded correlation of the
    # upstream with the spatially flipped, channel-swapped kernel.
    grad_input = conv_forward(upb, _flip_swap(kernel))
    win, wgt, out_prefix = _conv_subscripts(rank)
    grad_weights = np.einsum(f"no{out_prefix[1:]},{win}->{wgt}", upb, windows, optimize=True)
    grad_bias = upb.sum(axis=(0,) + tuple(range(2, 2 + rank)))
    return (grad_input if batched else grad_input[0]), grad_weights, grad_bias


def conv_backward(x: np.ndarray, kernel: ConvKernel, upstream: np.ndarray):
    """Gradients of ``sum(upstream * conv_forward(x, kernel))``.

    Returns ``(grad_input, grad_weights, grad_bias)``.
    """
    windows, batched = _conv_prepare(x, kernel)
    return conv_backward_cached((windows, batched), kernel, upstream)


# ---------------------------------------------------------------------------
# ReLU


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Subgradient at exactly 0 is taken as 0, keeping backward deterministic."""
    return np.where(x > 0, upstream, 0)


# ---------------------------------------------------------------------------
# batch normalization


def _bn_axes(x: np.ndarray, state: BatchNormState):
    if x.ndim < 2:
        raise ShapeError("batch norm input needs at least (batch, channel) axes")
    if x.shape[0] == 0:
        raise ShapeError("batch axis 0 is empty")
    if x.shape[1] != state.channels:
        raise ShapeError(f"channel axis has {x.shape[1]} channels, state expects {state.channels}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, state.channels) + (1,) * (x.ndim - 2)
    return axes, bshape


def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: str | None = None):
    """Normalize per channel, scale by gamma, shift by beta.

    Train mode normalizes by batch statistics over (batch, spatial) and
    returns a state whose running stats moved by one EMA step; infer mode
    is a deterministic affine map using the running stats and returns the
    state unchanged. Returns ``(out, new_state)``.
    """
    mode = state.mode if mode is None else mode
    axes, bshape = _bn_axes(x, state)
    if mode == "infer":
        inv = 1.0 / np.sqrt(state.running_var + state.epsilon)
        out = (x - state.running_mean.reshape(bshape)) * (state.gamma * inv).reshape(bshape)
        return out + state.beta.reshape(bshape), state
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv = 1.0 / np.sqrt(var + state.epsilon)
    out = (x - mean.reshape(bshape)) * (state.gamma * inv).reshape(bshape) + state.beta.reshape(bshape)
    m = state.momentum
    new_state = replace(
        state,
        running_mean=m * state.running_mean + (1.0 - m) * mean.astype(state.running_mean.dtype),
        running_var=m * state.running_var + (1.0 - m) * var.astype(state.running_var.dtype),
    )
    return out, new_state


def batchnorm_batch_stats(x: np.ndarray, state: BatchNormState):
    """Per-channel batch mean and (biased) variance over (batch, spatial)."""
    axes, _ = _bn_axes(x, state)
    return x.mean(axis=axes), x.var(axis=axes)


def batchnorm_backward(x: np.ndarray, state: BatchNormState, upstream: np.ndarray, mode: str | None = None):
    """Gradients of the batch-norm forward w.r.t. input, gamma, and beta."""
    mode = state.mode if mode is None else mode
    axes, bshape = _bn_axes(x, state)
    up = np.asarray(upstream)
    if up.shape != x.shape:
        raise ShapeError(f"upstream shape {up.shape} does not match input shape {x.shape}")
    if mode == "infer":
        inv = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (x - state.running_mean.reshape(bshape)) * inv.reshape(bshape)
        grad_input = up * (state.gamma * inv).reshape(bshape)
    else:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + state.epsilon)
        xhat = (x - mean.reshape(bshape)) * inv.reshape(bshape)
        g = up * state.gamma.reshape(bshape)
        g_mean = g.mean(axis=axes).reshape(bshape)
        gx_mean = (g * xhat).mean(axis=axes).reshape(bshape)
        grad_input = inv.reshape(bshape) * (g - g_mean - xhat * gx_mean)
    grad_gamma = (up * xhat).sum(axis=axes)
    grad_beta = up.sum(axis=axes)
    return grad_input, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_gradient(scalar_function, params: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate, one coordinate at a time.

    ``scalar_function`` maps an array shaped like ``params`` to a float.
    Slow by design; this is the independent oracle for the analytic
    backward passes.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    p = np.array(params, dtype=np.float64)
    grad = np.zeros_like(p)
    it = np.nditer(p, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        saved = p[idx]
        p[idx] = saved + step
        hi = float(scalar_function(p))
        p[idx] = saved - step
        lo = float(scalar_function(p))
        p[idx] = saved
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"non-finite function value at coordinate {idx}")
        grad[idx] = (hi - lo) / (2.0 * step)
    return grad
