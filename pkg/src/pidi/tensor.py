"""Dense NCHW tensor operators with analytic backward passes.

Tensors are plain ``numpy.ndarray`` objects of rank 4 (batch, channels,
height, width).  Every operator here is a pure function; the ones that
need saved state for the backward pass return it explicitly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operator."""


def as_tensor(x, dtype=None) -> np.ndarray:
    a = np.asarray(x, dtype=dtype if dtype is not None else None)
    if a.dtype.kind != "f":
        a = a.astype(DEFAULT_DTYPE)
    return a


def check_rank4(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (N, C, H, W), got shape {x.shape}")


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1 or self.dilation < 1 or self.groups < 1:
            raise ValueError(f"invalid ConvSpec {self}")
        if self.padding < 0:
            raise ValueError(f"negative padding in {self}")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        span = self.dilation * (self.kernel_size - 1) + 1
        ho = (h + 2 * self.padding - span) // self.stride + 1
        wo = (w + 2 * self.padding - span) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"zero-sized output: input {h}x{w} with kernel {self.kernel_size}, "
                f"padding {self.padding}, dilation {self.dilation}, stride {self.stride}"
            )
        return ho, wo


def _check_conv(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> tuple[int, int]:
    check_rank4(x, "input")
    check_rank4(w, "weight")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if kh != spec.kernel_size or kw != spec.kernel_size:
        raise ShapeError(f"weight kernel dims {kh}x{kw} != kernel_size {spec.kernel_size}")
    if c % spec.groups:
        raise ShapeError(f"input channels {c} not divisible by groups {spec.groups}")
    if o % spec.groups:
        raise ShapeError(f"output channels {o} not divisible by groups {spec.groups}")
    if cg != c // spec.groups:
        raise ShapeError(f"weight in-channels {cg} != input channels {c} / groups {spec.groups}")
    return spec.output_size(h, wd)


def pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def window(xp: np.ndarray, top: int, left: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Strided view of ``xp`` sampled at ``(top + stride*i, left + stride*j)``."""
    return xp[:, :, top: top + stride * (ho - 1) + 1: stride, left: left + stride * (wo - 1) + 1: stride]


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Gather receptive fields into an ``(N, C, k*k, Ho, Wo)`` array."""
    ho, wo = spec.output_size(x.shape[2], x.shape[3])
    xp = pad2d(x, spec.padding)
    k, d, s = spec.kernel_size, spec.dilation, spec.stride
    cols = np.empty(x.shape[:2] + (k * k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i * k + j] = window(xp, i * d, j * d, s, ho, wo)
    return cols


def col2im(cols: np.ndarray, x_shape: tuple, spec: ConvSpec) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    n, c, h, w = x_shape
    p, k, d, s = spec.padding, spec.kernel_size, spec.dilation, spec.stride
    ho, wo = cols.shape[-2:]
    gp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            window(gp, i * d, j * d, s, ho, wo)[...] += cols[:, :, i * k + j]
    return gp[:, :, p: p + h, p: p + w]


def im2col_cf(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Channel-first variant of :func:`im2col` with layout ``(C, k*k, N, Ho, Wo)``.

    Keeping the batch next to the spatial axes lets a whole layer run as one GEMM.
    """
    ho, wo = spec.output_size(x.shape[2], x.shape[3])
    xp = pad2d(x, spec.padding).transpose(1, 0, 2, 3)
    k, d, s = spec.kernel_size, spec.dilation, spec.stride
    cols = np.empty((x.shape[1], k * k, x.shape[0], ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i * k + j] = window(xp, i * d, j * d, s, ho, wo)
    return cols


def col2im_cf(cols: np.ndarray, x_shape: tuple, spec: ConvSpec) -> np.ndarray:
    """Adjoint of :func:`im2col_cf`, returning an NCHW array."""
    n, c, h, w = x_shape
    p, k, d, s = spec.padding, spec.kernel_size, spec.dilation, spec.stride
    ho, wo = cols.shape[-2:]
    gp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            window(gp, i * d, j * d, s, ho, wo)[...] += cols[:, i * k + j]
    return gp[:, :, p: p + h, p: p + w].transpose(1, 0, 2, 3)


def conv2d(x: np.ndarray, w: np.ndarray, spec: ConvSpec, bias: np.ndarray | None = None) -> np.ndarray:
    """Zero-padded 2-D convolution (cross-correlation), im2col + GEMM path."""
    ho, wo = _check_conv(x, w, spec)
    n, c = x.shape[:2]
    o = w.shape[0]
    g = spec.groups
    kk = spec.kernel_size ** 2
    if c // g == 1 and o == g:
        # depthwise: one filter per channel
        cols = im2col(x, spec)
        out = np.einsum("nckp,ck->ncp", cols.reshape(n, c, kk, -1), w.reshape(o, kk))
    else:
        cols = im2col_cf(x, spec).reshape(g, (c // g) * kk, n * ho * wo)
        out = np.matmul(w.reshape(g, o // g, -1), cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
        out = np.ascontiguousarray(out)
    out = out.reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray, spec: ConvSpec):
    """Vector-Jacobian products of :func:`conv2d` w.r.t. input and weight."""
    ho, wo = _check_conv(x, w, spec)
    n, c = x.shape[:2]
    o = w.shape[0]
    if grad_out.shape != (n, o, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, o, ho, wo)}")
    g = spec.groups
    kk = spec.kernel_size ** 2
    if c // g == 1 and o == g:
        cols = im2col(x, spec)
        gflat = grad_out.reshape(n, c, -1)
        cflat = cols.reshape(n, c, kk, -1)
        grad_w = np.einsum("ncp,nckp->ck", gflat, cflat).reshape(w.shape)
        gcols = gflat[:, :, None, :] * w.reshape(c, kk)[None, :, :, None]
        grad_x = col2im(gcols.reshape(n, c, kk, ho, wo), x.shape, spec)
    else:
        cflat = im2col_cf(x, spec).reshape(g, (c // g) * kk, n * ho * wo)
        gflat = grad_out.transpose(1, 0, 2, 3).reshape(g, o // g, n * ho * wo)
        grad_w = np.matmul(gflat, cflat.transpose(0, 2, 1)).reshape(w.shape)
        gcols = np.matmul(w.reshape(g, o // g, -1).transpose(0, 2, 1), gflat)
        grad_x = col2im_cf(gcols.reshape(c, kk, n, ho, wo), x.shape, spec)
    return grad_x.astype(x.dtype, copy=False), grad_w.astype(w.dtype, copy=False)


def conv2d_reference(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Direct-loop convolution used as an oracle for :func:`conv2d`.

    Accumulates each output element sequentially: channel-major, then kernel
    row, then kernel column.
    """
    ho, wo = _check_conv(x, w, spec)
    n, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    og = o // spec.groups
    p, s, d = spec.padding, spec.stride, spec.dilation
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(x, w))
    for b in range(n):
        for oc in range(o):
            g0 = (oc // og) * cg
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(cg):
                        for u in range(k):
                            y = i * s - p + u * d
                            if y < 0 or y >= h:
                                continue
                            for v in range(k):
                                xx = j * s - p + v * d
                                if 0 <= xx < wd:
                                    acc += w[oc, ic, u, v] * x[b, g0 + ic, y, xx]
                    out[b, oc, i, j] = acc
    return out


def pool2x2(x: np.ndarray, mode: str = "max"):
    """2x2 stride-2 pooling.  Returns ``(out, argmax)``; ``argmax`` is None for avg."""
    check_rank4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    if mode == "avg":
        return blocks.mean(axis=-1), None
    if mode == "max":
        idx = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], idx
    raise ValueError(f"unknown pooling mode {mode!r}")


def pool2x2_backward(grad_out: np.ndarray, mode: str, argmax: np.ndarray | None = None) -> np.ndarray:
    n, c, h2, w2 = grad_out.shape
    if mode == "avg":
        blocks = np.repeat(grad_out[..., None] * 0.25, 4, axis=-1)
    else:
        blocks = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
        np.put_along_axis(blocks, argmax[..., None], grad_out[..., None], axis=-1)
    return blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix (n_out, n_in) for half-pixel-centred bilinear resizing."""
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(m, (np.arange(n_out), i0), 1.0 - lam)
    np.add.at(m, (np.arange(n_out), i1), lam)
    return m


def upsample_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    check_rank4(x)
    h, w = x.shape[2:]
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"zero target size {out_h}x{out_w}")
    if out_h < h or out_w < w:
        raise ShapeError(f"upsample target {out_h}x{out_w} smaller than input {h}x{w}")
    if (out_h, out_w) == (h, w):
        return x.copy()
    ry = bilinear_matrix(h, out_h, x.dtype)
    rx = bilinear_matrix(w, out_w, x.dtype)
    return ry @ x @ rx.T


def upsample_bilinear_backward(grad_out: np.ndarray, in_hw: tuple[int, int]) -> np.ndarray:
    h, w = in_hw
    out_h, out_w = grad_out.shape[2:]
    if (out_h, out_w) == (h, w):
        return grad_out.copy()
    ry = bilinear_matrix(h, out_h, grad_out.dtype)
    rx = bilinear_matrix(w, out_w, grad_out.dtype)
    return ry.T @ grad_out @ rx


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def prelu(x, slope):
    """Channel-wise PReLU; ``slope`` has one entry per channel."""
    a = np.asarray(slope, dtype=x.dtype).reshape(1, -1, 1, 1)
    return np.where(x >= 0, x, a * x)


def prelu_backward(grad_out, x, slope):
    a = np.asarray(slope, dtype=x.dtype).reshape(1, -1, 1, 1)
    grad_x = np.where(x >= 0, grad_out, a * grad_out)
    grad_a = (grad_out * np.minimum(x, 0)).sum(axis=(0, 2, 3))
    return grad_x, grad_a.reshape(np.shape(slope))


def sigmoid(x):
    # split by sign to stay finite for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out, y):
    return grad_out * y * (1 - y)


def activation(x: np.ndarray, kind: str, slope=None) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "prelu":
        if slope is None:
            raise ValueError("prelu needs a per-channel slope")
        return prelu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")
