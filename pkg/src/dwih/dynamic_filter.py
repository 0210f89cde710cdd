"""b-value conditioned dynamic convolution.

A small controller convolves a constant 2-channel meta map (low_b/2000,
high_b/2000) with a 7x7 kernel bank of 128 filters and average-pools the
result. The first 64 pooled values scale the 64 kernels of a convolution
layer, one scalar per kernel; the last 64 are added to its bias.

Tensors are plain numpy arrays in NCHW layout. Arithmetic follows the
dtype of the inputs, so float64 arrays give a float64 forward/backward
pass for gradient checking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dwih.errors import InputError, ShapeError

N_KERNELS = 64
CONTROLLER_OUT = 2 * N_KERNELS
CONTROLLER_KERNEL = 7
META_SIZE = 16
B_NORM = 2000.0


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, C*kh*kw) patches under zero padding k // 2."""
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, :, ph : ph + h, pw : pw + w] = x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N, C, H, W, kh, kw)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Stride-1 cross-correlation with zero padding ``k // 2``.

    ``x`` is (N, C, H, W), ``w`` is (K, C, kh, kw) with odd kernel sizes.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {w.shape[1]}")
    n, _, h, wd = x.shape
    k = w.shape[0]
    cols = _im2col(x, *w.shape[2:])
    out = (cols @ w.reshape(k, -1).T).reshape(n, h, wd, k).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    """Gradients of :func:`conv2d` w.r.t. input, weights and bias."""
    kh, kw = w.shape[2:]
    ph, pw = kh // 2, kw // 2
    n, c, h, wd = x.shape
    k = w.shape[0]
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * h * wd, k)
    grad_w = (g.T @ _im2col(x, kh, kw)).reshape(w.shape)
    grad_b = g.sum(axis=0)
    # scatter patch gradients back onto the padded input
    gcols = (g @ w.reshape(k, -1)).reshape(n, h, wd, c, kh, kw)
    grad_xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_xp[:, :, i : i + h, j : j + wd] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_x = grad_xp[:, :, ph : ph + h, pw : pw + wd]
    return grad_x, grad_w, grad_b


def meta_tensor(low_b: float, high_b: float, size: int = META_SIZE, dtype=np.float32) -> np.ndarray:
    """Constant (2, size, size) map of the normalized b-value pair."""
    lo, hi = float(low_b) / B_NORM, float(high_b) / B_NORM
    if not (0.0 <= lo <= 1.0 and 0.0 <= hi <= 1.0):
        raise InputError(f"b-values ({low_b}, {high_b}) fall outside [0, {B_NORM}]")
    out = np.empty((2, size, size), dtype=dtype)
    out[0] = lo
    out[1] = hi
    return out


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass(frozen=True, eq=False)
class ScalingFactors:
    scale: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        for name in ("scale", "bias"):
            v = np.asarray(getattr(self, name))
            if v.shape != (N_KERNELS,):
                raise ShapeError(f"{name} must have shape ({N_KERNELS},), got {v.shape}")
            if not np.all(np.isfinite(v)):
                raise InputError(f"{name} contains non-finite values")
            object.__setattr__(self, name, v)

    @classmethod
    def identity(cls, dtype=np.float32) -> "ScalingFactors":
        return cls(np.ones(N_KERNELS, dtype=dtype), np.zeros(N_KERNELS, dtype=dtype))


@dataclass(frozen=True, eq=False)
class Controller:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w, b = np.asarray(self.weights), np.asarray(self.bias)
        expected = (CONTROLLER_OUT, 2, CONTROLLER_KERNEL, CONTROLLER_KERNEL)
        if w.shape != expected:
            raise ShapeError(f"controller weights must be {expected}, got {w.shape}")
        if b.shape != (CONTROLLER_OUT,):
            raise ShapeError(f"controller bias must be ({CONTROLLER_OUT},), got {b.shape}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def random(cls, rng: np.random.Generator, dtype=np.float32) -> "Controller":
        fan_in = 2 * CONTROLLER_KERNEL * CONTROLLER_KERNEL
        shape = (CONTROLLER_OUT, 2, CONTROLLER_KERNEL, CONTROLLER_KERNEL)
        return cls(uniform_init(rng, shape, fan_in, dtype), uniform_init(rng, CONTROLLER_OUT, fan_in, dtype))

    @classmethod
    def zeros(cls, dtype=np.float32) -> "Controller":
        return cls(
            np.zeros((CONTROLLER_OUT, 2, CONTROLLER_KERNEL, CONTROLLER_KERNEL), dtype=dtype),
            np.zeros(CONTROLLER_OUT, dtype=dtype),
        )


def controller_forward(ctrl: Controller, meta: np.ndarray) -> ScalingFactors:
    """Conv (pad 3) + global average pool; split 128 -> 64 scale, 64 bias."""
    meta = np.asarray(meta)
    if meta.ndim != 3 or meta.shape[0] != 2 or min(meta.shape[1:]) < 1:
        raise ShapeError(f"meta tensor must be (2, H, W), got {meta.shape}")
    fmap = conv2d(meta[None], ctrl.weights, ctrl.bias)[0]
    pooled = fmap.mean(axis=(1, 2))
    return ScalingFactors(pooled[:N_KERNELS], pooled[N_KERNELS:])


@dataclass(frozen=True, eq=False)
class DynamicConvLayer:
    """Convolution with 64 kernels whose weights are rescaled per kernel."""

    base_weights: np.ndarray
    base_bias: np.ndarray
    controller: Controller

    def __post_init__(self):
        w, b = np.asarray(self.base_weights), np.asarray(self.base_bias)
        if w.ndim != 4 or w.shape[0] != N_KERNELS:
            raise ShapeError(f"base weights must be ({N_KERNELS}, C, k, k), got {w.shape}")
        if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
            raise ShapeError(f"kernels must be square with odd size, got {w.shape[2:]}")
        if b.shape != (N_KERNELS,):
            raise ShapeError(f"base bias must be ({N_KERNELS},), got {b.shape}")
        object.__setattr__(self, "base_weights", w)
        object.__setattr__(self, "base_bias", b)

    @classmethod
    def random(cls, rng: np.random.Generator, in_channels: int, kernel_size: int = 3, dtype=np.float32):
        fan_in = in_channels * kernel_size * kernel_size
        w = uniform_init(rng, (N_KERNELS, in_channels, kernel_size, kernel_size), fan_in, dtype)
        b = uniform_init(rng, N_KERNELS, fan_in, dtype)
        return cls(w, b, Controller.random(rng, dtype))

    @property
    def in_channels(self) -> int:
        return self.base_weights.shape[1]

    def scaling(self, low_b: float, high_b: float) -> ScalingFactors:
        return controller_forward(self.controller, meta_tensor(low_b, high_b, dtype=self.base_weights.dtype))

    def __call__(self, x: np.ndarray, low_b: float, high_b: float) -> np.ndarray:
        return dynamic_conv_forward(self, x, self.scaling(low_b, high_b))


def _effective_params(layer: DynamicConvLayer, sf: ScalingFactors):
    w = layer.base_weights * sf.scale.reshape(-1, 1, 1, 1)
    b = layer.base_bias + sf.bias
    return w, b


def dynamic_conv_forward(layer: DynamicConvLayer, x: np.ndarray, sf: ScalingFactors) -> np.ndarray:
    """Convolve with ``scale[k] * theta_k`` and bias ``base_bias[k] + sf.bias[k]``."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ShapeError(f"input must be (N, {layer.in_channels}, H, W), got {x.shape}")
    w, b = _effective_params(layer, sf)
    return conv2d(x, w, b)


@dataclass(frozen=True, eq=False)
class DynamicConvGrads:
    input: np.ndarray
    weights: np.ndarray
    base_bias: np.ndarray
    scale: np.ndarray
    bias: np.ndarray


def dynamic_conv_backward(layer: DynamicConvLayer, x: np.ndarray, sf: ScalingFactors, grad_out: np.ndarray) -> DynamicConvGrads:
    """Analytic gradients of :func:`dynamic_conv_forward` given dL/d(output)."""
    x = np.asarray(x)
    grad_out = np.asarray(grad_out)
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ShapeError(f"input must be (N, {layer.in_channels}, H, W), got {x.shape}")
    expected = (x.shape[0], N_KERNELS, x.shape[2], x.shape[3])
    if grad_out.shape != expected:
        raise ShapeError(f"upstream gradient must be {expected}, got {grad_out.shape}")
    w_eff, _ = _effective_params(layer, sf)
    grad_x, grad_w_eff, grad_b_eff = conv2d_backward(x, w_eff, grad_out)
    return DynamicConvGrads(
        input=grad_x,
        weights=grad_w_eff * sf.scale.reshape(-1, 1, 1, 1),
        base_bias=grad_b_eff,
        scale=np.einsum("kcij,kcij->k", grad_w_eff, layer.base_weights),
        bias=grad_b_eff.copy(),
    )


def gradient_check(seed: int, h: float = 1e-3, batch: int = 1, in_channels: int = 2, size: int = 5, kernel_size: int = 3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Everything runs in float64 on a seeded random layer, input, scaling and
    upstream gradient. The scalar objective is ``sum(grad_out * forward)``.
    Relative error uses ``max(|a|, |b|, 1e-6)`` as denominator.
    """
    rng = np.random.default_rng(seed)
    layer = DynamicConvLayer.random(rng, in_channels, kernel_size, dtype=np.float64)
    x = rng.standard_normal((batch, in_channels, size, size))
    sf = ScalingFactors(rng.uniform(0.5, 1.5, N_KERNELS), rng.uniform(-0.5, 0.5, N_KERNELS))
    g = rng.standard_normal((batch, N_KERNELS, size, size))
    grads = dynamic_conv_backward(layer, x, sf, g)

    def objective(lay, xx, s):
        return float(np.sum(g * dynamic_conv_forward(lay, xx, s)))

    def numeric(arr, rebuild):
        out = np.empty(arr.size)
        flat = arr.reshape(-1)
        for i in range(arr.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = objective(*rebuild())
            flat[i] = orig - h
            fm = objective(*rebuild())
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
        return out.reshape(arr.shape)

    w = layer.base_weights.copy()
    bb = layer.base_bias.copy()
    sc = sf.scale.copy()
    sb = sf.bias.copy()
    xx = x.copy()

    def rebuild():
        return DynamicConvLayer(w, bb, layer.controller), xx, ScalingFactors(sc, sb)

    pairs = [
        (grads.input, numeric(xx, rebuild)),
        (grads.weights, numeric(w, rebuild)),
        (grads.base_bias, numeric(bb, rebuild)),
        (grads.scale, numeric(sc, rebuild)),
        (grads.bias, numeric(sb, rebuild)),
    ]
    worst = 0.0
    for analytic, fd in pairs:
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
        worst = max(worst, float(np.max(np.abs(analytic - fd) / denom)))
    return worst
