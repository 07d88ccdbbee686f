"""Dense NCHW tensor operations with hand-written gradients.

Tensors are plain ``numpy`` arrays of shape ``(n, c, h, w)``. Every op is
dtype-preserving, so the same code runs in float32 for training and in
float64 when a higher-precision reference is useful. Trainable arrays are
wrapped in :class:`Param`, which carries the gradient plane.

Convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor shapes violate an op's preconditions."""


class NumericalError(ArithmeticError):
    """Raised when a non-finite value shows up where it must not."""


def check_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NumericalError(f"non-finite value in {what} at index {tuple(int(i) for i in bad)}")


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride, self.dilation) < 1:
            raise ValueError(f"invalid conv spec {self}")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    @property
    def kind(self) -> str:
        if self.dilation > 1:
            return "dilated"
        return "strided" if self.stride > 1 else "regular"

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        span = self.dilation * (self.kernel - 1) + 1
        ho = (h + 2 * self.padding - span) // self.stride + 1
        wo = (w + 2 * self.padding - span) // self.stride + 1
        return ho, wo


class ConvLayer:
    """Convolution parameters: weight ``(out, in, k, k)`` and bias ``(out,)``."""

    def __init__(self, spec: ConvSpec, weight=None, bias=None, rng=None, dtype=DTYPE):
        self.spec = spec
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        if weight is None:
            # He-style scaled uniform
            rng = np.random.default_rng(0) if rng is None else rng
            fan_in = spec.in_channels * spec.kernel * spec.kernel
            bound = np.sqrt(6.0 / fan_in)
            weight = rng.uniform(-bound, bound, size=shape)
        if bias is None:
            bias = np.zeros(spec.out_channels)
        weight = np.asarray(weight, dtype=dtype)
        bias = np.asarray(bias, dtype=dtype)
        if weight.shape != shape:
            raise ShapeError(f"weight shape {weight.shape} does not match spec {shape}")
        if bias.shape != (spec.out_channels,):
            raise ShapeError(f"bias shape {bias.shape} does not match {spec.out_channels} outputs")
        self.weight = Param(weight)
        self.bias = Param(bias)

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def __call__(self, x):
        return conv2d_forward(x, self)


def _check_nchw(x: np.ndarray, what="input"):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (n, c, h, w), got shape {x.shape}")


GEMM_BLOCK = 256


def _windows(x: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """Strided view of shape (n, c, ho, wo, k, k) over the padded input."""
    p = spec.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    span = spec.dilation * (spec.kernel - 1) + 1
    v = sliding_window_view(x, (span, span), axis=(2, 3))
    s, d = spec.stride, spec.dilation
    return v[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s, ::d, ::d]


def _im2col(x, spec, ho, wo):
    n, c = x.shape[:2]
    v = _windows(x, spec, ho, wo)
    # (n, c, k, k, ho, wo): one column per output pixel, channel-major rows
    return v.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * spec.kernel * spec.kernel, ho * wo)


def _gemm_blocks(wmat: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """``wmat @ cols[i]`` for every batch item, in fixed-width column blocks.

    BLAS picks different kernels (and summation orders) for different matrix
    widths. Feeding it only ``GEMM_BLOCK``-wide blocks, with the tail padded,
    makes each output column independent of the image size, so a stride-2
    conv is bit-identical to subsampling the stride-1 result.
    """
    n, k, p = cols.shape
    nb, rem = divmod(p, GEMM_BLOCK)
    full = nb * GEMM_BLOCK
    out = np.empty((n, wmat.shape[0], p), dtype=np.result_type(wmat, cols))
    for i in range(n):
        if nb:
            blocks = cols[i, :, :full].reshape(k, nb, GEMM_BLOCK).transpose(1, 0, 2)
            out[i, :, :full] = np.matmul(wmat, blocks).transpose(1, 0, 2).reshape(-1, full)
        if rem:
            tail = np.zeros((k, GEMM_BLOCK), dtype=cols.dtype)
            tail[:, :rem] = cols[i, :, full:]
            out[i, :, full:] = (wmat @ tail)[:, :rem]
    return out


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    _check_nchw(x)
    spec = layer.spec
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"expected {spec.in_channels} input channels, got {c}")
    ho, wo = spec.output_size(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"output size {ho}x{wo} is empty for input {h}x{w} and {spec}")
    cols = _im2col(x, spec, ho, wo)
    wmat = layer.weight.value.reshape(spec.out_channels, -1)
    out = _gemm_blocks(wmat, cols) + layer.bias.value[:, None]
    return out.reshape(n, spec.out_channels, ho, wo)


def conv2d_backward(x: np.ndarray, layer: ConvLayer, upstream_grad: np.ndarray):
    """Return ``(grad_x, grad_w, grad_b)`` for ``sum(upstream_grad * conv(x))``."""
    _check_nchw(x)
    spec = layer.spec
    n, c, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    if upstream_grad.shape != (n, spec.out_channels, ho, wo):
        raise ShapeError(
            f"upstream grad shape {upstream_grad.shape} != output shape {(n, spec.out_channels, ho, wo)}"
        )
    k, s, d, p = spec.kernel, spec.stride, spec.dilation, spec.padding
    g = upstream_grad.reshape(n, spec.out_channels, ho * wo)
    cols = _im2col(x, spec, ho, wo)
    grad_w = np.einsum("nop,nqp->oq", g, cols).reshape(layer.weight.value.shape)
    grad_b = g.sum(axis=(0, 2))
    wmat = layer.weight.value.reshape(spec.out_channels, -1)
    gcols = np.matmul(wmat.T, g).reshape(n, c, k, k, ho, wo)
    gx = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            gx[:, :, i * d : i * d + (ho - 1) * s + 1 : s, j * d : j * d + (wo - 1) * s + 1 : s] += gcols[:, :, i, j]
    if p:
        gx = gx[:, :, p:-p, p:-p]
    return np.ascontiguousarray(gx), grad_w.astype(x.dtype), grad_b.astype(x.dtype)


def subsample2(x: np.ndarray) -> np.ndarray:
    """Keep every second row and column starting at 0."""
    return x[:, :, ::2, ::2]


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row i holds the half-pixel-centre bilinear weights of output sample i."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def upsample_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with ``align_corners=False`` semantics."""
    _check_nchw(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError("output size must be at least 1x1")
    ah = _interp_matrix(x.shape[2], out_h, x.dtype)
    aw = _interp_matrix(x.shape[3], out_w, x.dtype)
    return np.ascontiguousarray(ah @ x @ aw.T)


def upsample_bilinear_backward(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    ah = _interp_matrix(in_h, grad.shape[2], grad.dtype)
    aw = _interp_matrix(in_w, grad.shape[3], grad.dtype)
    return np.ascontiguousarray(ah.T @ grad @ aw)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


def maxpool2(x: np.ndarray):
    """2x2 stride-2 max pooling. Odd trailing rows/columns are dropped.

    Returns ``(out, argmax)``; ``argmax`` indexes the winning cell of each
    window (row-major, first maximum wins) and feeds :func:`maxpool2_backward`.
    """
    _check_nchw(x)
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"maxpool2 needs at least 2x2 input, got {h}x{w}")
    win = x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h2, w2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2_backward(grad: np.ndarray, argmax: np.ndarray, in_shape) -> np.ndarray:
    n, c, h, w = in_shape
    h2, w2 = grad.shape[2], grad.shape[3]
    win = np.zeros((n, c, h2, w2, 4), dtype=grad.dtype)
    np.put_along_axis(win, argmax[..., None], grad[..., None], axis=-1)
    win = win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    gx = np.zeros(in_shape, dtype=grad.dtype)
    gx[:, :, : 2 * h2, : 2 * w2] = win
    return gx


@dataclass(frozen=True)
class XentResult:
    loss: float
    grad: np.ndarray
    counted: int

    @property
    def all_ignored(self) -> bool:
        return self.counted == 0


def softmax_xent(logits: np.ndarray, target: np.ndarray, ignore_label: int | None = 0) -> XentResult:
    """Pixel-wise softmax cross-entropy averaged over non-ignored pixels.

    ``logits`` is ``(n, K, h, w)`` scoring classes ``1..K``; ``target`` is
    ``(n, h, w)`` with labels in ``0..K`` where label ``c`` selects logit
    channel ``c - 1``. Pixels equal to ``ignore_label`` contribute nothing.
    """
    _check_nchw(logits, "logits")
    n, k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() > k):
        raise ShapeError(f"target labels must lie in 0..{k}")
    counted = target != ignore_label if ignore_label is not None else np.ones(target.shape, bool)
    if ignore_label != 0 and np.any(target[counted] == 0):
        raise ShapeError("label 0 has no logit channel; it must be the ignore label")
    count = int(counted.sum())
    if count == 0:
        return XentResult(0.0, np.zeros_like(logits), 0)

    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    prob = ez / denom
    idx = np.clip(target.astype(np.int64) - 1, 0, k - 1)[:, None]
    logp_true = np.take_along_axis(z, idx, axis=1)[:, 0] - np.log(denom[:, 0])
    loss = -float(logp_true[counted].sum()) / count

    grad = prob
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1.0, axis=1)
    grad *= counted[:, None] / count
    return XentResult(loss, grad.astype(logits.dtype), count)
