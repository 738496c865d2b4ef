"""Differentiable layer primitives on float64 numpy arrays.

Volumetric activations are laid out channel-first, ``(C, D, H, W)``; the
batch axis is absent because training runs one sample at a time.  Every
forward function has a matching ``*_backward`` that returns exact analytic
gradients.  Convolutions use direct summation expressed as an im2col
contraction, or for stride-1 layers with at least four input channels as
one matmul per kernel tap over the flattened padded volume.  Either way the
reduction order is fixed and results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

AXES = ("depth", "height", "width")


class ShapeError(ValueError):
    """Raised when array shapes are inconsistent with a layer's contract."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")
        if len(self.kernel) != 3 or min(self.kernel) < 1:
            raise ShapeError(f"kernel must be 3 positive ints, got {self.kernel}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, *self.kernel)

    @property
    def transposed_weight_shape(self) -> tuple[int, ...]:
        return (self.in_channels, self.out_channels, *self.kernel)

    def output_size(self, size: tuple[int, int, int]) -> tuple[int, int, int]:
        out = []
        for axis, n, k in zip(AXES, size, self.kernel):
            m = (n + 2 * self.padding - k) // self.stride + 1
            if n < 1 or m < 1:
                raise ShapeError(f"{axis} axis: input extent {n} too small for kernel {k}")
            out.append(m)
        return tuple(out)

    def transposed_output_size(self, size: tuple[int, int, int]) -> tuple[int, int, int]:
        out = []
        for axis, n, k in zip(AXES, size, self.kernel):
            m = (n - 1) * self.stride + k - 2 * self.padding
            if n < 1 or m < 1:
                raise ShapeError(f"{axis} axis: non-positive extent ({n} -> {m})")
            out.append(m)
        return tuple(out)


def _check_volume(x: np.ndarray, channels: int, name: str = "x") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be (C, D, H, W), got shape {x.shape}")
    if x.shape[0] != channels:
        raise ShapeError(f"channel axis of {name}: expected {channels}, got {x.shape[0]}")
    for axis, n in zip(AXES, x.shape[1:]):
        if n < 1:
            raise ShapeError(f"{axis} axis of {name} is empty")


def _check_params(weights, bias, shape, channels):
    if weights.shape != shape:
        raise ShapeError(f"weights: expected shape {shape}, got {weights.shape}")
    if bias is not None and bias.shape != (channels,):
        raise ShapeError(f"bias: expected shape ({channels},), got {bias.shape}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))


def _windows(xp: np.ndarray, kernel, stride: int) -> np.ndarray:
    """Strided view of shape (C, D', H', W', kd, kh, kw)."""
    win = sliding_window_view(xp, kernel, axis=(1, 2, 3))
    return win[:, ::stride, ::stride, ::stride]


def _scatter(cols: np.ndarray, out_shape, kernel, stride: int) -> np.ndarray:
    """Adjoint of ``_windows``: accumulate (C, kd, kh, kw, D', H', W') into (C, *out_shape)."""
    out = np.zeros((cols.shape[0], *out_shape))
    n = cols.shape[4:]
    for a in range(kernel[0]):
        for b in range(kernel[1]):
            for c in range(kernel[2]):
                out[:,
                    a:a + stride * (n[0] - 1) + 1:stride,
                    b:b + stride * (n[1] - 1) + 1:stride,
                    c:c + stride * (n[2] - 1) + 1:stride] += cols[:, a, b, c]
    return out


def _crop(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, p:-p, p:-p, p:-p]


class _FlatShift:
    """Stride-1 correlation on the flattened padded volume.

    Output voxel ``(i, j, k)`` sits at flat index ``i*Hp*Wp + j*Wp + k`` and
    kernel tap ``(a, b, c)`` reads the input at that index plus a constant
    offset, so each tap is one matmul on a contiguous slice.  Columns that
    fall in the padding margin are junk and are discarded (or zeroed on the
    way in).
    """

    def __init__(self, padded_shape, kernel):
        self.padded = tuple(padded_shape)
        self.kernel = tuple(kernel)
        dp, hp, wp = self.padded
        self.out = (dp - kernel[0] + 1, hp - kernel[1] + 1, wp - kernel[2] + 1)
        d, h, w = self.out
        self.length = (d - 1) * hp * wp + (h - 1) * wp + w
        self.taps = [((a, b, c), a * hp * wp + b * wp + c)
                     for a in range(kernel[0]) for b in range(kernel[1]) for c in range(kernel[2])]

    def to_grid(self, flat):
        d, h, w = self.out
        _, hp, wp = self.padded
        full = np.zeros((flat.shape[0], d * hp * wp))
        full[:, :self.length] = flat
        return full.reshape(-1, d, hp, wp)[:, :, :h, :w]

    def from_grid(self, g):
        d, h, w = self.out
        _, hp, wp = self.padded
        full = np.zeros((g.shape[0], d, hp, wp))
        full[:, :, :h, :w] = g
        return full.reshape(g.shape[0], -1)[:, :self.length]

    def forward(self, xp, weights):
        flat = xp.reshape(xp.shape[0], -1)
        per_tap = np.ascontiguousarray(weights.transpose(2, 3, 4, 0, 1))
        y = np.zeros((weights.shape[0], self.length))
        tmp = np.empty_like(y)
        for (a, b, c), off in self.taps:
            np.matmul(per_tap[a, b, c], flat[:, off:off + self.length], out=tmp)
            y += tmp
        return self.to_grid(y)

    def grad_weights(self, xp, g_flat):
        flat = xp.reshape(xp.shape[0], -1)
        gw = np.empty((g_flat.shape[0], xp.shape[0], *self.kernel))
        for (a, b, c), off in self.taps:
            gw[:, :, a, b, c] = (flat[:, off:off + self.length] @ g_flat.T).T
        return gw

    def grad_input(self, weights, g_flat):
        per_tap = np.ascontiguousarray(weights.transpose(2, 3, 4, 1, 0))
        gx = np.zeros((weights.shape[1], int(np.prod(self.padded))))
        tmp = np.empty((weights.shape[1], self.length))
        for (a, b, c), off in self.taps:
            np.matmul(per_tap[a, b, c], g_flat, out=tmp)
            gx[:, off:off + self.length] += tmp
        return gx.reshape(-1, *self.padded)


def conv3d_forward(x, spec: ConvSpec, weights, bias):
    """Zero-padded 3D cross-correlation.

    ``weights`` has shape ``(C_out, C_in, kd, kh, kw)``.
    """
    _check_volume(x, spec.in_channels)
    _check_params(weights, bias, spec.weight_shape, spec.out_channels)
    spec.output_size(x.shape[1:])
    y = _correlate(_pad(x, spec.padding), weights, spec.kernel, spec.stride)
    return y + bias[:, None, None, None]


def _correlate(xp, weights, kernel, stride):
    # flat-shift loses to im2col when the per-tap matmuls are too thin
    if stride == 1 and xp.shape[0] >= 4:
        return _FlatShift(xp.shape[1:], kernel).forward(xp, weights)
    win = _windows(xp, kernel, stride)
    return np.tensordot(weights, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))


def conv3d_backward(x, spec: ConvSpec, weights, grad_out, need_input: bool = True):
    """Gradients of ``sum(grad_out * conv3d_forward(x, ...))``.

    Returns ``(grad_x, grad_weights, grad_bias)``; ``grad_x`` is None when
    ``need_input`` is false (first layer of a network).
    """
    _check_volume(x, spec.in_channels)
    _check_params(weights, None, spec.weight_shape, spec.out_channels)
    out_size = spec.output_size(x.shape[1:])
    if grad_out.shape != (spec.out_channels, *out_size):
        raise ShapeError(
            f"grad_out: expected shape {(spec.out_channels, *out_size)}, got {grad_out.shape}")
    xp = _pad(x, spec.padding)
    grad_b = grad_out.sum(axis=(1, 2, 3))
    if spec.stride == 1:
        shift = _FlatShift(xp.shape[1:], spec.kernel)
        g_flat = shift.from_grid(grad_out)
        grad_w = shift.grad_weights(xp, g_flat)
        if not need_input:
            return None, grad_w, grad_b
        if spec.out_channels >= 4 or spec.padding >= max(spec.kernel):
            grad_x = _crop(shift.grad_input(weights, g_flat), spec.padding)
        else:
            # full correlation with the flipped, channel-transposed kernel bank
            flipped = weights[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
            q = [k - 1 - spec.padding for k in spec.kernel]
            gp = np.pad(grad_out, ((0, 0), (q[0], q[0]), (q[1], q[1]), (q[2], q[2])))
            grad_x = _correlate(gp, flipped, spec.kernel, 1)
        return grad_x, grad_w, grad_b
    win = _windows(xp, spec.kernel, spec.stride)
    grad_w = np.tensordot(grad_out, win, axes=([1, 2, 3], [1, 2, 3]))
    if not need_input:
        return None, grad_w, grad_b
    cols = np.tensordot(weights, grad_out, axes=([0], [0]))
    grad_xp = _scatter(cols, xp.shape[1:], spec.kernel, spec.stride)
    return _crop(grad_xp, spec.padding), grad_w, grad_b


def deconv3d_forward(x, spec: ConvSpec, weights, bias):
    """Transposed convolution, the adjoint of ``conv3d_forward`` plus a bias.

    ``weights`` has shape ``(C_in, C_out, kd, kh, kw)`` where ``C_in`` is the
    channel count of ``x``.  With kernel 2 and stride 2 every input voxel is
    stamped into its own 2x2x2 output block.
    """
    _check_volume(x, spec.in_channels)
    _check_params(weights, bias, spec.transposed_weight_shape, spec.out_channels)
    out_size = spec.transposed_output_size(x.shape[1:])
    full = tuple(n + 2 * spec.padding for n in out_size)
    cols = np.tensordot(weights, x, axes=([0], [0]))
    y = _crop(_scatter(cols, full, spec.kernel, spec.stride), spec.padding)
    return y + bias[:, None, None, None]


def deconv3d_backward(x, spec: ConvSpec, weights, grad_out):
    """Returns ``(grad_x, grad_weights, grad_bias)`` for ``deconv3d_forward``."""
    _check_volume(x, spec.in_channels)
    _check_params(weights, None, spec.transposed_weight_shape, spec.out_channels)
    out_size = spec.transposed_output_size(x.shape[1:])
    if grad_out.shape != (spec.out_channels, *out_size):
        raise ShapeError(
            f"grad_out: expected shape {(spec.out_channels, *out_size)}, got {grad_out.shape}")
    win = _windows(_pad(grad_out, spec.padding), spec.kernel, spec.stride)
    grad_x = np.tensordot(weights, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    grad_w = np.tensordot(x, win, axes=([1, 2, 3], [1, 2, 3]))
    grad_b = grad_out.sum(axis=(1, 2, 3))
    return grad_x, grad_w, grad_b


@dataclass
class BatchNormState:
    """Affine parameters and running statistics for one normalization layer.

    ``momentum`` is the retention factor of the running averages:
    ``running <- momentum * running + (1 - momentum) * sample``.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9, epsilon: float = 1e-5):
        return cls(np.ones(channels), np.zeros(channels),
                   np.zeros(channels), np.ones(channels), momentum, epsilon)

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BatchNormCache:
    mode: str
    x_hat: np.ndarray
    inv_std: np.ndarray = field(repr=False)


def _channel_view(v, ndim):
    return v.reshape((-1,) + (1,) * (ndim - 1))


def batchnorm_forward(x, state: BatchNormState, mode: str = "train", update_stats: bool = True):
    """Per-channel normalization over all non-channel positions of one sample.

    In ``train`` mode the sample's own statistics are used and, unless
    ``update_stats`` is false, folded into the running averages.  ``infer``
    mode uses only the running statistics.  ``x`` is ``(C, ...)``.
    """
    if x.ndim < 2 or x.shape[0] != state.channels:
        raise ShapeError(f"channel axis: expected {state.channels}, got shape {x.shape}")
    if x[0].size == 0:
        raise ShapeError("batchnorm input has zero spatial extent")
    axes = tuple(range(1, x.ndim))
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_stats:
            m = state.momentum
            state.running_mean = m * state.running_mean + (1 - m) * mean
            state.running_var = m * state.running_var + (1 - m) * var
    elif mode == "infer":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    x_hat = (x - _channel_view(mean, x.ndim)) * _channel_view(inv_std, x.ndim)
    y = _channel_view(state.gamma, x.ndim) * x_hat + _channel_view(state.beta, x.ndim)
    return y, BatchNormCache(mode, x_hat, inv_std)


def batchnorm_backward(grad_out, state: BatchNormState, cache: BatchNormCache):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    nd = grad_out.ndim
    axes = tuple(range(1, nd))
    grad_gamma = (grad_out * cache.x_hat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    g_hat = grad_out * _channel_view(state.gamma, nd)
    scale = _channel_view(cache.inv_std, nd)
    if cache.mode == "infer":
        return g_hat * scale, grad_gamma, grad_beta
    mean_g = g_hat.mean(axis=axes, keepdims=True)
    mean_gx = (g_hat * cache.x_hat).mean(axis=axes, keepdims=True)
    grad_x = scale * (g_hat - mean_g - cache.x_hat * mean_gx)
    return grad_x, grad_gamma, grad_beta


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def sigmoid(x):
    return expit(x)


def sigmoid_backward(y, grad_out):
    """Takes the sigmoid *output* ``y``."""
    return grad_out * y * (1.0 - y)


def linear(x, weights, bias):
    """Affine map ``W @ x + b`` for a vector ``x`` of length n and ``W`` of shape (m, n)."""
    if x.ndim != 1 or weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise ShapeError(f"linear: weights {weights.shape} incompatible with input {x.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match {weights.shape[0]} outputs")
    return weights @ x + bias


def linear_backward(x, weights, grad_out):
    """Returns ``(grad_x, grad_weights, grad_bias)``."""
    return weights.T @ grad_out, np.outer(grad_out, x), grad_out.copy()
