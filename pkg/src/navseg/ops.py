"""Forward/backward numerical kernels: convolutions, pooling, batchnorm,
and the elementwise glue every block is composed of.

All convolution variants share one im2col + GEMM core so that, e.g., a
1x1 pointwise convolution is bit-identical to a standard convolution
with K=1. Backward passes reuse the cached column matrices and scatter
input gradients with K*K strided slice-adds (a vectorized col2im).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, NumericalError
from .tensor import Tensor, make_result

CONV_KINDS = ("standard", "depthwise", "pointwise", "transposed")


# ---------------------------------------------------------------------------
# weight containers
# ---------------------------------------------------------------------------


@dataclass
class ConvWeights:
    """Kernel + bias for one convolution layer.

    Geometry by kind:
      standard / transposed: (C_out, C_in, K, K)
      depthwise:             (C, 1, K, K) — one filter per input channel
      pointwise:             (C_out, C_in, 1, 1)

    The bias, when present, has one entry per output channel and is held
    as a (1, C_out, 1, 1) tensor so it can receive gradients like any
    other parameter.
    """

    kind: str
    kernel: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in CONV_KINDS:
            raise ShapeError(f"unknown convolution kind {self.kind!r}")
        o, c, kh, kw = self.kernel.shape
        if kh != kw:
            raise ShapeError(f"kernels must be square, got {kh}x{kw}")
        if self.kind == "depthwise" and c != 1:
            raise ShapeError(
                f"depthwise kernels take exactly one filter per channel; "
                f"got per-filter channel count {c}"
            )
        if self.kind == "pointwise" and kh != 1:
            raise ShapeError(f"pointwise kernels must be 1x1, got {kh}x{kh}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.bias is not None and self.bias.shape != (1, o, 1, 1):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {o} output channels"
            )
        if not np.isfinite(self.kernel.data).all():
            raise NumericalError("non-finite convolution kernel")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[0] if self.kind == "depthwise" else self.kernel.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[2]

    def parameters(self) -> list[Tensor]:
        return [self.kernel] if self.bias is None else [self.kernel, self.bias]


@dataclass
class BatchNormParams:
    """Per-channel affine normalization state.

    gamma/beta are trainable (1, C, 1, 1) tensors; the running statistics
    are plain arrays of length C updated only in train mode.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        c = self.gamma.shape[1]
        if self.beta.shape != (1, c, 1, 1):
            raise ShapeError("gamma and beta must have the same channel count")
        if self.running_mean.shape != (c,) or self.running_var.shape != (c,):
            raise ShapeError("running statistics must have one entry per channel")
        if (self.running_var < 0).any():
            raise ShapeError("running variance entries must be >= 0")
        if self.eps <= 0:
            raise ShapeError("eps must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


def init_conv_weights(
    kind: str,
    in_channels: int,
    out_channels: int,
    kernel_size: int,
    stride: int = 1,
    padding: int = 0,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
    with_bias: bool = True,
) -> ConvWeights:
    """Fresh convolution weights: uniform in +-sqrt(6/fan_in), zero bias."""
    k = kernel_size
    if kind == "depthwise":
        shape = (in_channels, 1, k, k)
        fan_in = k * k
    elif kind == "pointwise":
        shape = (out_channels, in_channels, 1, 1)
        fan_in = in_channels
    else:
        shape = (out_channels, in_channels, k, k)
        fan_in = in_channels * k * k
    bound = math.sqrt(6.0 / fan_in)
    if rng is None:
        kernel = np.zeros(shape, dtype=dtype)
    else:
        kernel = rng.uniform(-bound, bound, size=shape).astype(dtype)
    bias = None
    if with_bias:
        bias = Tensor(np.zeros((1, shape[0], 1, 1), dtype=dtype), requires_grad=True)
    return ConvWeights(
        kind=kind,
        kernel=Tensor(kernel, requires_grad=True),
        bias=bias,
        stride=stride,
        padding=padding,
    )


def init_batchnorm(channels: int, dtype=np.float32, eps: float = 1e-5) -> BatchNormParams:
    return BatchNormParams(
        gamma=Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
        eps=eps,
    )


# ---------------------------------------------------------------------------
# im2col / col2im core
# ---------------------------------------------------------------------------


def _pad_spatial(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, k: int, stride: int):
    # xp: padded input (N, C, Hp, Wp) -> (N*Ho*Wo, C*K*K) plus (Ho, Wo)
    v = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = v.shape[:4]
    cols = np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * k * k
    )
    return cols, ho, wo


def _col2im(dcols: np.ndarray, padded_shape, k: int, stride: int, ho: int, wo: int):
    n, c, hp, wp = padded_shape
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    d = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += d[
                :, :, :, :, ki, kj
            ]
    return dxp


def _check_weights(x: Tensor, w: ConvWeights, expected_kind: str, op: str) -> None:
    if w.kind != expected_kind:
        raise ShapeError(f"{op} requires {expected_kind!r} weights, got {w.kind!r}")
    if x.dtype != w.kernel.dtype:
        raise ShapeError(
            f"{op}: input dtype {x.dtype} does not match weight dtype {w.kernel.dtype}"
        )
    if not np.isfinite(w.kernel.data).all() or (
        w.bias is not None and not np.isfinite(w.bias.data).all()
    ):
        raise NumericalError(f"{op}: non-finite weights")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def _conv_core(x: Tensor, w: ConvWeights, op: str) -> Tensor:
    n, c, h, wd = x.shape
    o = w.out_channels
    k = w.kernel_size
    s, p = w.stride, w.padding
    if c != w.in_channels:
        raise ShapeError(
            f"{op}: input has {c} channels but weights expect {w.in_channels}"
        )
    if h + 2 * p < k or wd + 2 * p < k:
        raise ShapeError(
            f"{op}: padded spatial extent ({h + 2 * p}x{wd + 2 * p}) smaller than kernel {k}"
        )
    xp = _pad_spatial(x.data, p)
    cols, ho, wo = _im2col(xp, k, s)
    kmat = w.kernel.data.reshape(o, -1)
    out = cols @ kmat.T
    if w.bias is not None:
        out = out + w.bias.data.reshape(o)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    kernel, bias = w.kernel, w.bias
    padded_shape = xp.shape

    def backward_fn(g: np.ndarray) -> None:
        g_col = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if kernel.requires_grad:
            kernel.accumulate_grad((g_col.T @ cols).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)).reshape(bias.shape))
        if x.requires_grad:
            dcols = g_col @ kmat
            dxp = _col2im(dcols, padded_shape, k, s, ho, wo)
            dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
            x.accumulate_grad(np.ascontiguousarray(dx))

    parents = [x, kernel] if bias is None else [x, kernel, bias]
    return make_result(out, parents, backward_fn)


def conv2d(x: Tensor, w: ConvWeights) -> Tensor:
    """Standard 2-D convolution with zero padding.

    Output shape (N, C_out, floor((H+2p-K)/s)+1, floor((W+2p-K)/s)+1);
    each output value is the full C_in*K*K inner product plus bias.
    """
    _check_weights(x, w, "standard", "conv2d")
    return _conv_core(x, w, "conv2d")


def pointwise_conv2d(x: Tensor, w: ConvWeights) -> Tensor:
    """1x1 channel-mixing convolution; identical to conv2d with K=1."""
    _check_weights(x, w, "pointwise", "pointwise_conv2d")
    if w.stride != 1 or w.padding != 0:
        raise ShapeError("pointwise_conv2d requires stride 1 and padding 0")
    return _conv_core(x, w, "pointwise_conv2d")


def depthwise_conv2d(x: Tensor, w: ConvWeights) -> Tensor:
    """Per-channel spatial convolution: channel c of the output depends
    only on channel c of the input."""
    _check_weights(x, w, "depthwise", "depthwise_conv2d")
    n, c, h, wd = x.shape
    if c != w.out_channels:
        raise ShapeError(
            f"depthwise_conv2d: {w.out_channels} filters for {c} input channels"
        )
    k = w.kernel_size
    s, p = w.stride, w.padding
    if h + 2 * p < k or wd + 2 * p < k:
        raise ShapeError(
            f"depthwise_conv2d: padded extent smaller than kernel {k}"
        )
    xp = _pad_spatial(x.data, p)
    v = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = v.shape[2], v.shape[3]
    kern = w.kernel.data[:, 0]  # (C, K, K)
    out = np.einsum("nchwij,cij->nchw", v, kern, optimize=True)
    if w.bias is not None:
        out = out + w.bias.data
    out = np.ascontiguousarray(out)

    kernel, bias = w.kernel, w.bias
    padded_shape = xp.shape

    def backward_fn(g: np.ndarray) -> None:
        if kernel.requires_grad:
            dk = np.einsum("nchwij,nchw->cij", v, g, optimize=True)
            kernel.accumulate_grad(dk[:, None])
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)).reshape(bias.shape))
        if x.requires_grad:
            dxp = np.zeros(padded_shape, dtype=g.dtype)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki : ki + s * ho : s, kj : kj + s * wo : s] += (
                        g * kern[None, :, ki, kj, None, None]
                    )
            dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
            x.accumulate_grad(np.ascontiguousarray(dx))

    parents = [x, kernel] if bias is None else [x, kernel, bias]
    return make_result(out, parents, backward_fn)


def transposed_conv2d(x: Tensor, w: ConvWeights) -> Tensor:
    """Adjoint of a stride-2 K=3 convolution; output is exactly 2H x 2W.

    Realized as zero-stuffing (stride-1 gaps) plus a stride-1 correlation
    with the spatially flipped kernel; output-side padding is fixed so the
    doubling is exact.
    """
    _check_weights(x, w, "transposed", "transposed_conv2d")
    if w.stride != 2 or w.kernel_size != 3:
        raise ShapeError(
            "transposed_conv2d supports only stride 2 with K=3 "
            "(other configurations cannot double the spatial dims exactly)"
        )
    n, c, h, wd = x.shape
    o = w.out_channels
    k = 3
    # stuffed grid (2H-1) + 1 leading and 2 trailing zeros per axis
    xup = np.zeros((n, c, 2 * h + 2, 2 * wd + 2), dtype=x.dtype)
    xup[:, :, 1 : 2 * h : 2, 1 : 2 * wd : 2] = x.data
    kf = np.ascontiguousarray(w.kernel.data[:, :, ::-1, ::-1])
    cols, ho, wo = _im2col(xup, k, 1)  # ho = 2H, wo = 2W
    kmat = kf.reshape(o, -1)
    out = cols @ kmat.T
    if w.bias is not None:
        out = out + w.bias.data.reshape(o)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    kernel, bias = w.kernel, w.bias
    up_shape = xup.shape

    def backward_fn(g: np.ndarray) -> None:
        g_col = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if kernel.requires_grad:
            dkf = (g_col.T @ cols).reshape(kernel.shape)
            kernel.accumulate_grad(np.ascontiguousarray(dkf[:, :, ::-1, ::-1]))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)).reshape(bias.shape))
        if x.requires_grad:
            dcols = g_col @ kmat
            dxup = _col2im(dcols, up_shape, k, 1, ho, wo)
            x.accumulate_grad(
                np.ascontiguousarray(dxup[:, :, 1 : 2 * h : 2, 1 : 2 * wd : 2])
            )

    parents = [x, kernel] if bias is None else [x, kernel, bias]
    return make_result(out, parents, backward_fn)


# ---------------------------------------------------------------------------
# pooling / normalization
# ---------------------------------------------------------------------------


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2. Odd spatial dims are rejected rather
    than silently padded."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d requires even spatial dims, got {h}x{w}")
    v = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    windows = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    am = windows.argmax(axis=-1)  # first max wins on ties
    out = np.take_along_axis(windows, am[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            dwin = np.zeros_like(windows)
            np.put_along_axis(dwin, am[..., None], g[..., None], axis=-1)
            dx = (
                dwin.reshape(n, c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w)
            )
            x.accumulate_grad(np.ascontiguousarray(dx))

    return make_result(out, [x], backward_fn)


def batchnorm(x: Tensor, p: BatchNormParams, mode: str = "infer") -> Tensor:
    """Channel-wise batch normalization.

    infer: uses the stored running statistics.
    train: normalizes with batch statistics and folds them into the
    running estimates with momentum (running = m*running + (1-m)*batch).
    """
    if mode not in ("train", "infer"):
        raise ShapeError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")
    n, c, h, w = x.shape
    if p.channels != c:
        raise ShapeError(
            f"batchnorm: parameter length {p.channels} does not match {c} channels"
        )
    gamma, beta = p.gamma, p.beta
    if mode == "infer":
        inv = 1.0 / np.sqrt(p.running_var + p.eps)
        scale = (gamma.data.reshape(c) * inv).astype(x.dtype)
        xc = x.data - p.running_mean.astype(x.dtype)[None, :, None, None]
        out = xc * scale[None, :, None, None] + beta.data

        def backward_infer(g: np.ndarray) -> None:
            if gamma.requires_grad:
                invx = xc * inv.astype(x.dtype)[None, :, None, None]
                gamma.accumulate_grad((g * invx).sum(axis=(0, 2, 3)).reshape(gamma.shape))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=(0, 2, 3)).reshape(beta.shape))
            if x.requires_grad:
                x.accumulate_grad(np.ascontiguousarray(g * scale[None, :, None, None]))

        return make_result(np.ascontiguousarray(out), [x, gamma, beta], backward_infer)

    # train mode
    m = n * h * w
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + p.eps)).astype(x.dtype)
    xc = x.data - mu[None, :, None, None]
    xhat = xc * inv[None, :, None, None]
    out = gamma.data * xhat + beta.data
    p.running_mean[:] = p.momentum * p.running_mean + (1 - p.momentum) * mu
    p.running_var[:] = p.momentum * p.running_var + (1 - p.momentum) * var

    def backward_train(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)).reshape(beta.shape))
        if x.requires_grad:
            dxhat = g * gamma.data
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            x.accumulate_grad(np.ascontiguousarray(dx.astype(x.dtype, copy=False)))

    return make_result(np.ascontiguousarray(out), [x, gamma, beta], backward_train)


# ---------------------------------------------------------------------------
# elementwise / shape glue
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return make_result(out, [x], backward_fn)


def add_elementwise(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add_elementwise: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return make_result(out, [a, b], backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Channel concatenation with a's channels first."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels: N/H/W must match, got {a.shape} and {b.shape}"
        )
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.ascontiguousarray(g[:, :ca]))
        if b.requires_grad:
            b.accumulate_grad(np.ascontiguousarray(g[:, ca:]))

    return make_result(out, [a, b], backward_fn)


def pad_channels(x: Tensor, total_channels: int) -> Tensor:
    """Append zero-valued channels until the tensor has ``total_channels``."""
    n, c, h, w = x.shape
    if total_channels < c:
        raise ShapeError(f"pad_channels: cannot shrink {c} channels to {total_channels}")
    if total_channels == c:
        return x
    out = np.zeros((n, total_channels, h, w), dtype=x.dtype)
    out[:, :c] = x.data

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.ascontiguousarray(g[:, :c]))

    return make_result(out, [x], backward_fn)


def select_channels(x: Tensor, indices) -> Tensor:
    """Keep the listed channels, in the listed order."""
    idx = np.asarray(indices, dtype=np.int64)
    c = x.shape[1]
    if idx.size == 0 or idx.min() < 0 or idx.max() >= c:
        raise ShapeError(f"select_channels: indices out of range for {c} channels")
    out = np.ascontiguousarray(x.data[:, idx])

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[:, idx] = g
            x.accumulate_grad(dx)

    return make_result(out, [x], backward_fn)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Duplicate every pixel into a 2x2 block."""
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            dx = g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
            x.accumulate_grad(np.ascontiguousarray(dx))

    return make_result(out, [x], backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Reduce a tensor to a (1,1,1,1) scalar by summing every element."""
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype).reshape(1, 1, 1, 1)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g.reshape(())))

    return make_result(out, [x], backward_fn)


def mul_constant(x: Tensor, c) -> Tensor:
    """Multiply by a non-trainable scalar or same-shaped array constant."""
    carr = np.asarray(c, dtype=x.dtype)
    if carr.ndim not in (0, 4):
        raise ShapeError("mul_constant takes a scalar or a 4-D constant")
    if carr.ndim == 4 and carr.shape != x.data.shape:
        raise ShapeError(f"constant shape {carr.shape} does not match {x.shape}")
    out = x.data * carr

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * carr)

    return make_result(out, [x], backward_fn)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    if x.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs >= 2 channels, got {x.shape[1]}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            x.accumulate_grad(np.ascontiguousarray(y * (g - dot)))

    return make_result(np.ascontiguousarray(y), [x], backward_fn)
